//! Per-point label recovery from a predicted label image.
//!
//! Several points can share one range-image pixel, so reading each point's
//! own pixel smears labels across depth discontinuities. Nearest label
//! assignment instead looks at a `k × k` patch around the point's pixel and
//! takes the label of the pixel whose range best matches the point's own.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelImage};
use crate::projection::PointPixelMap;
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    /// Registered strategy name: `nla`, `knn` or `unproject`.
    pub method: String,
    /// Odd patch side.
    pub k: usize,
    pub knn_neighbors: usize,
    pub knn_sigma: f64,
    pub knn_cutoff: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            method: "nla".into(),
            k: 5,
            knn_neighbors: 5,
            knn_sigma: 1.0,
            knn_cutoff: 1.0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("patch size k must be odd and ≥ 1, got {}", self.k)));
        }
        if self.knn_neighbors == 0 {
            return Err(Error::Config("knn_neighbors must be ≥ 1".into()));
        }
        if !(self.knn_sigma > 0.0) {
            return Err(Error::Config("knn_sigma must be > 0".into()));
        }
        if !(self.knn_cutoff >= 0.0) {
            return Err(Error::Config("knn_cutoff must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// A strategy turning a label image back into per-point labels.
pub trait PostProcessor: Send + Sync {
    fn name(&self) -> &'static str;

    /// `range` holds 0 on empty pixels.
    fn assign(&self, range: &Grid<f32>, labels: &LabelImage, map: &PointPixelMap) -> Result<Vec<u8>>;
}

fn check_inputs(range: &Grid<f32>, labels: &LabelImage, map: &PointPixelMap) -> Result<()> {
    if range.shape() != labels.shape() {
        return Err(Error::Input(format!(
            "range image is {:?} but label image is {:?}",
            range.shape(),
            labels.shape()
        )));
    }
    map.check_bounds(range.height(), range.width())
}

/// Inclusive patch bounds around `center`, clamped to `0..len`.
#[inline]
fn patch_span(center: usize, half: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(half), (center + half).min(len - 1))
}

/// Nearest label assignment.
///
/// For each point, scans the clamped `k × k` patch row-major from its
/// top-left and keeps the first non-empty pixel with the strictly smallest
/// `|range − point range|`. Points whose patch is all empty keep the label
/// at their own pixel.
pub fn nla(range: &Grid<f32>, labels: &LabelImage, map: &PointPixelMap, cfg: &PatchConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    check_inputs(range, labels, map)?;
    let half = cfg.k / 2;
    let (h, w) = range.shape();
    Ok((0..map.len())
        .into_par_iter()
        .map(|i| {
            let (row, col) = map.pixel(i);
            let target = map.ranges[i];
            let (r0, r1) = patch_span(row, half, h);
            let (c0, c1) = patch_span(col, half, w);
            let mut min_diff = f32::INFINITY;
            let mut label = None;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let rv = range.at(r, c);
                    if !(rv > 0.0) {
                        continue;
                    }
                    let diff = (rv - target).abs();
                    if diff < min_diff {
                        min_diff = diff;
                        label = Some(labels.at(r, c));
                    }
                }
            }
            label.unwrap_or_else(|| labels.at(row, col))
        })
        .collect())
}

/// Range-weighted k-nearest-neighbour vote.
///
/// Candidates are the non-empty patch pixels within `knn_cutoff` of the
/// point's range. They are ranked by `|Δrange| / g` where
/// `g = exp(−(dr² + dc²) / 2σ²)` downweights pixels far from the patch
/// centre, and the `knn_neighbors` best cast one vote each. The most voted
/// class wins, ties going to the smaller id. With no candidates the point
/// keeps its own pixel's label.
pub fn knn_postprocess(
    range: &Grid<f32>,
    labels: &LabelImage,
    map: &PointPixelMap,
    cfg: &PatchConfig,
) -> Result<Vec<u8>> {
    cfg.validate()?;
    check_inputs(range, labels, map)?;
    let half = cfg.k / 2;
    let (h, w) = range.shape();
    let two_sigma_sq = 2.0 * cfg.knn_sigma * cfg.knn_sigma;
    Ok((0..map.len())
        .into_par_iter()
        .map(|i| {
            let (row, col) = map.pixel(i);
            let target = map.ranges[i];
            let (r0, r1) = patch_span(row, half, h);
            let (c0, c1) = patch_span(col, half, w);
            let mut cands: Vec<(f64, u8)> = Vec::with_capacity(cfg.k * cfg.k);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let rv = range.at(r, c);
                    if !(rv > 0.0) {
                        continue;
                    }
                    let diff = (rv - target).abs() as f64;
                    if diff > cfg.knn_cutoff {
                        continue;
                    }
                    let (dr, dc) = (r.abs_diff(row) as f64, c.abs_diff(col) as f64);
                    let weighted = diff * ((dr * dr + dc * dc) / two_sigma_sq).exp();
                    cands.push((weighted, labels.at(r, c)));
                }
            }
            if cands.is_empty() {
                return labels.at(row, col);
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut votes = [0u32; 256];
            for &(_, l) in cands.iter().take(cfg.knn_neighbors) {
                votes[l as usize] += 1;
            }
            let mut best = 0usize;
            for (class, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = class;
                }
            }
            best as u8
        })
        .collect())
}

pub struct Unproject;

impl PostProcessor for Unproject {
    fn name(&self) -> &'static str {
        "unproject"
    }

    fn assign(&self, range: &Grid<f32>, labels: &LabelImage, map: &PointPixelMap) -> Result<Vec<u8>> {
        check_inputs(range, labels, map)?;
        crate::projection::unproject_labels(map, labels)
    }
}

pub struct Nla(pub PatchConfig);

impl PostProcessor for Nla {
    fn name(&self) -> &'static str {
        "nla"
    }

    fn assign(&self, range: &Grid<f32>, labels: &LabelImage, map: &PointPixelMap) -> Result<Vec<u8>> {
        nla(range, labels, map, &self.0)
    }
}

pub struct Knn(pub PatchConfig);

impl PostProcessor for Knn {
    fn name(&self) -> &'static str {
        "knn"
    }

    fn assign(&self, range: &Grid<f32>, labels: &LabelImage, map: &PointPixelMap) -> Result<Vec<u8>> {
        knn_postprocess(range, labels, map, &self.0)
    }
}

/// All built-in post-processors, keyed by [`PatchConfig::method`].
pub fn registry() -> Registry<PatchConfig, dyn PostProcessor> {
    let mut r: Registry<PatchConfig, dyn PostProcessor> = Registry::new("post-processor");
    r.register("nla", |cfg| {
        cfg.validate()?;
        Ok(Box::new(Nla(cfg.clone())))
    })
    .register("knn", |cfg| {
        cfg.validate()?;
        Ok(Box::new(Knn(cfg.clone())))
    })
    .register("unproject", |_| Ok(Box::new(Unproject)));
    r
}

/// Builds the post-processor named in `cfg.method`.
pub fn from_config(cfg: &PatchConfig) -> Result<Box<dyn PostProcessor>> {
    registry().create(&cfg.method, cfg)
}
