//! Int8 fake quantization with per-tensor power-of-two scales.
//!
//! Every learned parameter tensor and every activation edge gets its own
//! exponent `e`, scale `2^e`, chosen from max-abs calibration as the
//! smallest `e` with `127·2^e ≥ maxabs`. Inference stays in `f32` but each
//! value is snapped to the int8 grid before use.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ForwardHook, Model, ParamKind};
use crate::tensor::Tensor;

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;
/// Exponent used for tensors that are identically zero.
pub const ZERO_TENSOR_EXPONENT: i32 = -7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bitwidth: u32,
    /// Parameter tensor name → exponent.
    pub weights: BTreeMap<String, i32>,
    /// Activation edge name → exponent.
    pub activations: BTreeMap<String, i32>,
}

impl Default for QuantParams {
    fn default() -> Self {
        QuantParams {
            bitwidth: 8,
            weights: BTreeMap::new(),
            activations: BTreeMap::new(),
        }
    }
}

impl QuantParams {
    /// Checks that every learned parameter and activation edge has an exponent.
    pub fn check_covers(&self, model: &Model) -> Result<()> {
        for p in model.params().iter().filter(|p| p.kind.is_learned()) {
            if !self.weights.contains_key(&p.name) {
                return Err(Error::Config(format!("no quantization exponent for tensor {}", p.name)));
            }
        }
        for name in model.activation_names() {
            if !self.activations.contains_key(&name) {
                return Err(Error::Config(format!("no quantization exponent for activation {name}")));
            }
        }
        Ok(())
    }
}

/// `2^e`, exact.
pub fn scale_of(exponent: i32) -> f32 {
    2f32.powi(exponent)
}

/// Smallest `e` with `127·2^e ≥ maxabs`.
pub fn exponent_for(maxabs: f32) -> i32 {
    if !(maxabs > 0.0) {
        return ZERO_TENSOR_EXPONENT;
    }
    let m = maxabs as f64;
    let mut e = (m / QMAX as f64).log2().ceil() as i32;
    // log2 can be off by one ulp near exact powers of two
    while QMAX as f64 * 2f64.powi(e - 1) >= m {
        e -= 1;
    }
    while (QMAX as f64 * 2f64.powi(e)) < m {
        e += 1;
    }
    e
}

/// `clamp(round_half_away(x / scale), −128, 127)`.
#[inline]
pub fn quantize(x: f32, scale: f32) -> i8 {
    (x / scale).round().clamp(QMIN as f32, QMAX as f32) as i8
}

#[inline]
pub fn dequantize(q: i8, scale: f32) -> f32 {
    q as f32 * scale
}

#[inline]
pub fn fake_quant(x: f32, scale: f32) -> f32 {
    dequantize(quantize(x, scale), scale)
}

pub fn fake_quant_slice(values: &[f32], exponent: i32) -> Vec<f32> {
    let s = scale_of(exponent);
    values.iter().map(|&v| fake_quant(v, s)).collect()
}

pub fn max_abs(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Records the largest magnitude seen on every activation edge.
#[derive(Debug, Default, Clone)]
struct MaxAbsRecorder {
    maxima: BTreeMap<String, f32>,
}

impl MaxAbsRecorder {
    fn merge(mut self, other: MaxAbsRecorder) -> MaxAbsRecorder {
        for (k, v) in other.maxima {
            let e = self.maxima.entry(k).or_insert(0.0);
            *e = e.max(v);
        }
        self
    }
}

impl ForwardHook for MaxAbsRecorder {
    fn activation(&mut self, name: &str, t: &mut Tensor) -> Result<()> {
        let m = max_abs(t.data());
        let e = self.maxima.entry(name.to_string()).or_insert(0.0);
        *e = e.max(m);
        Ok(())
    }
}

/// Max-abs calibration over a set of representative inputs.
pub fn calibrate(model: &Model, calib: &[Tensor]) -> Result<QuantParams> {
    if calib.is_empty() {
        return Err(Error::Calibration("calibration set is empty".into()));
    }
    let weights = model
        .params()
        .iter()
        .filter(|p| p.kind.is_learned())
        .map(|p| (p.name.clone(), exponent_for(max_abs(p.values))))
        .collect();

    let recorded = calib
        .par_iter()
        .map(|x| {
            let mut rec = MaxAbsRecorder::default();
            model.forward_with(x, &mut rec).map(|_| rec)
        })
        .try_reduce(MaxAbsRecorder::default, |a, b| Ok(a.merge(b)))?;
    let activations = recorded
        .maxima
        .into_iter()
        .map(|(k, m)| (k, exponent_for(m)))
        .collect();

    Ok(QuantParams {
        bitwidth: 8,
        weights,
        activations,
    })
}

/// Snaps parameters and activations to their int8 grids.
pub struct FakeQuantHook<'p> {
    params: &'p QuantParams,
    bypass: bool,
}

impl<'p> FakeQuantHook<'p> {
    pub fn new(params: &'p QuantParams) -> Self {
        FakeQuantHook { params, bypass: false }
    }

    /// With bypass on, values pass through untouched.
    pub fn bypass(mut self, on: bool) -> Self {
        self.bypass = on;
        self
    }
}

impl ForwardHook for FakeQuantHook<'_> {
    fn param<'a>(&mut self, name: &str, kind: ParamKind, values: &'a [f32]) -> Result<Cow<'a, [f32]>> {
        if self.bypass || !kind.is_learned() {
            return Ok(Cow::Borrowed(values));
        }
        let e = self
            .params
            .weights
            .get(name)
            .ok_or_else(|| Error::Config(format!("no quantization exponent for tensor {name}")))?;
        Ok(Cow::Owned(fake_quant_slice(values, *e)))
    }

    fn activation(&mut self, name: &str, t: &mut Tensor) -> Result<()> {
        if self.bypass {
            return Ok(());
        }
        let e = self
            .params
            .activations
            .get(name)
            .ok_or_else(|| Error::Config(format!("no quantization exponent for activation {name}")))?;
        let s = scale_of(*e);
        for v in t.data_mut() {
            *v = fake_quant(*v, s);
        }
        Ok(())
    }
}

pub fn fake_quantized_forward(model: &Model, params: &QuantParams, input: &Tensor) -> Result<Tensor> {
    model.forward_with(input, &mut FakeQuantHook::new(params))
}
