//! Inference primitives: direct convolution, batch norm, ReLU, bilinear resize.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
}

/// `floor((n + 2p − d·(k−1) − 1) / s) + 1`, or `None` if the window does not fit.
pub fn conv_output_len(n: usize, k: usize, s: usize, d: usize, p: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    let padded = n + 2 * p;
    (padded >= span).then(|| (padded - span) / s + 1)
}

impl ConvSpec {
    /// Square kernel with "same" padding for odd kernels, `d·(k−1)/2`.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, stride: usize, dilation: usize) -> Self {
        let pad = dilation * (k - 1) / 2;
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (stride, stride),
            dilation: (dilation, dilation),
            padding: (pad, pad),
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("conv dimensions must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    pub fn output_shape(&self, in_h: usize, in_w: usize) -> Option<(usize, usize)> {
        let h = conv_output_len(in_h, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0)?;
        let w = conv_output_len(in_w, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1)?;
        Some((h, w))
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_channels * out_h * out_w) as u64 * (self.in_channels * self.kernel.0 * self.kernel.1) as u64
    }
}

/// Output indices `lo..hi` for which `o·s + offset` lands inside `0..n`.
fn valid_outputs(offset: isize, s: usize, n: usize, out: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = n as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(out);
    (lo as usize, hi.max(lo as usize))
}

/// Zero-padded direct convolution. `weights` is `(out, in, kh, kw)`.
///
/// Every output element accumulates `bias` and then the in-bounds taps in
/// `(in_channel, ky, kx)` order, so results do not depend on where the
/// tensor was cropped from.
pub fn conv2d(x: &Tensor, spec: &ConvSpec, weights: &[f32], bias: Option<&[f32]>) -> Result<Tensor> {
    spec.validate()?;
    let (in_c, in_h, in_w) = x.shape();
    if in_c != spec.in_channels {
        return Err(Error::Config(format!(
            "conv expects {} input channels, got {in_c}",
            spec.in_channels
        )));
    }
    if weights.len() != spec.weight_len() {
        return Err(Error::Config(format!(
            "conv weight has {} values, expected {}",
            weights.len(),
            spec.weight_len()
        )));
    }
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.len() == spec.out_channels => {}
        (false, None) => {}
        _ => return Err(Error::Config("conv bias does not match spec".into())),
    }
    let (out_h, out_w) = spec.output_shape(in_h, in_w).ok_or_else(|| {
        Error::Config(format!("conv window larger than padded input {in_h}×{in_w}"))
    })?;

    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let mut out = Tensor::zeros(spec.out_channels, out_h, out_w);
    let plane = out_h * out_w;
    if plane == 0 {
        return Ok(out);
    }

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(oc, dst)| {
            dst.fill(bias.map_or(0.0, |b| b[oc]));
            for ic in 0..in_c {
                let src = x.plane(ic);
                let wbase = (oc * in_c + ic) * kh * kw;
                for ky in 0..kh {
                    let off_y = (ky * dh) as isize - ph;
                    let (y0, y1) = valid_outputs(off_y, sh, in_h, out_h);
                    for kx in 0..kw {
                        let wv = weights[wbase + ky * kw + kx];
                        let off_x = (kx * dw) as isize - pw;
                        let (x0, x1) = valid_outputs(off_x, sw, in_w, out_w);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy * sh) as isize + off_y;
                            let src_row = &src[iy as usize * in_w..(iy as usize + 1) * in_w];
                            let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                            if sw == 1 {
                                let start = (x0 as isize + off_x) as usize;
                                let src_seg = &src_row[start..start + (x1 - x0)];
                                for (d, s) in dst_row[x0..x1].iter_mut().zip(src_seg) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ((ox * sw) as isize + off_x) as usize;
                                    dst_row[ox] += wv * src_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Inference-mode batch normalization parameters, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.mean.len() != n || self.var.len() != n {
            return Err(Error::Config("batch norm parameter lengths differ".into()));
        }
        if let Some(c) = (0..n).find(|&c| !(self.var[c] + self.eps > 0.0)) {
            return Err(Error::Config(format!(
                "batch norm channel {c} has var + eps = {} (must be > 0)",
                self.var[c] + self.eps
            )));
        }
        Ok(())
    }
}

/// `γ·(x − mean)/sqrt(var + ε) + β` per channel.
pub fn batchnorm(x: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let mut y = x.clone();
    batchnorm_in_place(&mut y, bn)?;
    Ok(y)
}

pub fn batchnorm_in_place(x: &mut Tensor, bn: &BatchNorm) -> Result<()> {
    bn.validate()?;
    if x.channels() != bn.channels() {
        return Err(Error::Config(format!(
            "batch norm has {} channels, input has {}",
            bn.channels(),
            x.channels()
        )));
    }
    let plane = x.plane_len();
    if plane == 0 {
        return Ok(());
    }
    x.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(c, p)| {
            let (g, b, m) = (bn.gamma[c], bn.beta[c], bn.mean[c]);
            let d = (bn.var[c] + bn.eps).sqrt();
            for v in p.iter_mut() {
                *v = g * (*v - m) / d + b;
            }
        });
    Ok(())
}

/// Folds a following batch norm into conv weights and bias.
///
/// Returns the folded spec (always with bias), weights and bias.
pub fn fold_batchnorm(
    spec: &ConvSpec,
    weights: &[f32],
    bias: Option<&[f32]>,
    bn: &BatchNorm,
) -> Result<(ConvSpec, Vec<f32>, Vec<f32>)> {
    bn.validate()?;
    if bn.channels() != spec.out_channels || weights.len() != spec.weight_len() {
        return Err(Error::Config("batch norm does not match conv".into()));
    }
    let per_out = spec.weight_len() / spec.out_channels;
    let mut w = Vec::with_capacity(weights.len());
    let mut b = Vec::with_capacity(spec.out_channels);
    for oc in 0..spec.out_channels {
        let scale = bn.gamma[oc] as f64 / ((bn.var[oc] + bn.eps) as f64).sqrt();
        w.extend(
            weights[oc * per_out..(oc + 1) * per_out]
                .iter()
                .map(|&v| (v as f64 * scale) as f32),
        );
        let b0 = bias.map_or(0.0, |b| b[oc] as f64);
        b.push(((b0 - bn.mean[oc] as f64) * scale + bn.beta[oc] as f64) as f32);
    }
    Ok((spec.with_bias(true), w, b))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    relu_in_place(&mut y);
    y
}

pub fn relu_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Elementwise `x += y`.
pub fn add_in_place(x: &mut Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Config(format!(
            "residual add shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
    Ok(())
}

/// Source sample pair and blend weight for each output index along one axis.
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

/// Bilinear resize with half-pixel centres: output index `d` samples source
/// coordinate `(d + 0.5)·in/out − 0.5`, clamped to the edge samples.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be at least 1×1".into()));
    }
    let (c, in_h, in_w) = x.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    if in_h == 0 || in_w == 0 {
        return Err(Error::Config("cannot resize an empty tensor".into()));
    }
    let rows = resize_axis(in_h, out_h);
    let cols = resize_axis(in_w, out_w);
    let mut out = Tensor::zeros(c, out_h, out_w);
    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(ch, dst)| {
            let src = x.plane(ch);
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                let r0 = &src[y0 * in_w..(y0 + 1) * in_w];
                let r1 = &src[y1 * in_w..(y1 + 1) * in_w];
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let top = lerp(r0[x0], r0[x1], fx);
                    let bot = lerp(r1[x0], r1[x1], fx);
                    dst[oy * out_w + ox] = lerp(top, bot, fy);
                }
            }
        });
    Ok(out)
}
