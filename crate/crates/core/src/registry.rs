//! Name → constructor tables for interchangeable strategies.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Factory<C, T> = fn(&C) -> Result<Box<T>>;

/// Strategies of one family, built from a shared context `C`.
pub struct Registry<C, T: ?Sized> {
    family: &'static str,
    entries: BTreeMap<&'static str, Factory<C, T>>,
}

impl<C, T: ?Sized> Registry<C, T> {
    pub fn new(family: &'static str) -> Self {
        Registry {
            family,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory<C, T>) -> &mut Self {
        self.entries.insert(name, factory);
        self
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn create(&self, name: &str, ctx: &C) -> Result<Box<T>> {
        let factory = self.entries.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown {} {name:?}; available: {}",
                self.family,
                self.names().join(", ")
            ))
        })?;
        factory(ctx)
    }
}
