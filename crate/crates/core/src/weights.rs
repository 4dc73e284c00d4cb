//! Weight files: a JSON manifest plus a flat little-endian `f32` blob.
//!
//! ```json
//! {
//!   "format": "rangeseg-weights",
//!   "version": 1,
//!   "data_file": "model.bin",
//!   "network": { ...NetworkConfig... },
//!   "tensors": [
//!     { "name": "stem.0.weight", "shape": [16, 8, 3, 3], "offset": 0, "exponent": -6 }
//!   ],
//!   "activation_exponents": { "input": 0, ... }
//! }
//! ```
//!
//! `offset` is in bytes from the start of `data_file`, which is resolved
//! relative to the manifest. `exponent` and `activation_exponents` are
//! present only after calibration.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Init, Model, NetworkConfig};
use crate::quantization::QuantParams;

pub const FORMAT_TAG: &str = "rangeseg-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub data_file: String,
    pub network: NetworkConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub activation_exponents: BTreeMap<String, i32>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::WeightFormat(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT_TAG || m.version != FORMAT_VERSION {
            return Err(Error::WeightFormat(format!(
                "{}: unsupported format {:?} version {}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Quantization exponents, if the manifest carries any.
    pub fn quant_params(&self) -> Option<QuantParams> {
        let weights: BTreeMap<String, i32> = self
            .tensors
            .iter()
            .filter_map(|t| t.exponent.map(|e| (t.name.clone(), e)))
            .collect();
        if weights.is_empty() && self.activation_exponents.is_empty() {
            return None;
        }
        Some(QuantParams {
            bitwidth: 8,
            weights,
            activations: self.activation_exponents.clone(),
        })
    }

    pub fn set_quant_params(&mut self, params: &QuantParams) {
        for t in &mut self.tensors {
            t.exponent = params.weights.get(&t.name).copied();
        }
        self.activation_exponents = params.activations.clone();
    }
}

fn data_path(manifest_path: &Path, data_file: &str) -> PathBuf {
    manifest_path
        .parent()
        .map_or_else(|| PathBuf::from(data_file), |dir| dir.join(data_file))
}

/// Writes `<path>` (manifest) and a sibling `.bin` blob.
pub fn save_weights(model: &Model, path: impl AsRef<Path>, quant: Option<&QuantParams>) -> Result<()> {
    let path = path.as_ref();
    let data_name = path
        .with_extension("bin")
        .file_name()
        .ok_or_else(|| Error::Input(format!("bad weight path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: blob.len() as u64,
            exponent: quant.and_then(|q| q.weights.get(&p.name).copied()),
        });
        for v in p.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        data_file: data_name.clone(),
        network: model.config.clone(),
        tensors,
        activation_exponents: quant.map(|q| q.activations.clone()).unwrap_or_default(),
    };
    let blob_path = data_path(path, &data_name);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    manifest.write(path)
}

/// Loads a model and any stored quantization exponents.
pub fn load_weights(path: impl AsRef<Path>) -> Result<(Model, Option<QuantParams>)> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    let blob_path = data_path(path, &manifest.data_file);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let mut model = Model::build(&manifest.network, Init::Zeros)
        .map_err(|e| Error::WeightFormat(format!("manifest network: {e}")))?;
    let shapes: HashMap<String, Vec<usize>> = model
        .params()
        .into_iter()
        .map(|p| (p.name, p.shape))
        .collect();
    let mut entries: HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();

    for (name, values) in model.params_mut() {
        let entry = entries
            .remove(name.as_str())
            .ok_or_else(|| Error::WeightFormat(format!("manifest lacks tensor {name}")))?;
        if entry.shape != shapes[&name] {
            return Err(Error::WeightFormat(format!(
                "tensor {name}: manifest shape {:?}, network expects {:?}",
                entry.shape, shapes[&name]
            )));
        }
        let start = entry.offset as usize;
        let end = start + values.len() * 4;
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::WeightFormat(format!(
                "tensor {name} spans bytes {start}..{end} but {} holds {}",
                blob_path.display(),
                blob.len()
            ))
        })?;
        for (v, b) in values.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::WeightFormat(format!("manifest has unknown tensor {extra}")));
    }
    for cb in model.stem.iter().chain(model.stages.iter().flatten().flat_map(|b| {
        [&b.conv1, &b.conv2].into_iter().chain(b.shortcut.as_ref())
    })) {
        cb.bn
            .validate()
            .map_err(|e| Error::WeightFormat(format!("{}: {e}", cb.name())))?;
    }
    let quant = manifest.quant_params();
    Ok((model, quant))
}

/// Rewrites the exponents stored in an existing manifest.
pub fn store_quant_params(path: impl AsRef<Path>, params: &QuantParams) -> Result<()> {
    let path = path.as_ref();
    let mut m = Manifest::read(path)?;
    m.set_quant_params(params);
    m.write(path)
}
