//! Per-class IoU scoring and reference values for the two training losses.
//!
//! Class 0 is "unlabeled" and ignored everywhere: it never enters the
//! confusion matrix and pixels labelled 0 are skipped by both losses.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelImage;
use crate::kitti_io::{ClassRemap, NUM_CLASSES};
use crate::tensor::Tensor;

/// Number of scored classes (all but the ignore class).
pub const NUM_EVAL_CLASSES: usize = NUM_CLASSES - 1;

/// `counts[gt][pred]` over points with non-zero ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<[u64; NUM_CLASSES]>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        ConfusionMatrix {
            counts: vec![[0; NUM_CLASSES]; NUM_CLASSES],
        }
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(bad) = pred.iter().chain(gt).find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Input(format!("class id {bad} out of range")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != 0 {
                self.counts[g as usize][p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    /// IoU of classes 1..=19; a class with nothing to score gets 0.
    pub fn per_class_iou(&self) -> Vec<f64> {
        (1..NUM_CLASSES)
            .map(|c| {
                let tp = self.counts[c][c];
                let row: u64 = self.counts[c].iter().sum();
                let col: u64 = self.counts.iter().map(|r| r[c]).sum();
                let denom = row + col - tp;
                if denom == 0 {
                    0.0
                } else {
                    tp as f64 / denom as f64
                }
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        self.per_class_iou().iter().sum::<f64>() / NUM_EVAL_CLASSES as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub points: u64,
    pub mean_iou: f64,
    pub classes: Vec<ClassScore>,
}

impl EvalReport {
    pub fn new(cm: &ConfusionMatrix, remap: &ClassRemap, frames: usize) -> Self {
        EvalReport {
            frames,
            points: cm.total(),
            mean_iou: cm.mean_iou(),
            classes: cm
                .per_class_iou()
                .into_iter()
                .enumerate()
                .map(|(i, iou)| ClassScore {
                    class: remap.class_name(i as u8 + 1).to_string(),
                    iou,
                })
                .collect(),
        }
    }

    /// One header row of class names and one row of IoU × 100.
    pub fn to_table(&self) -> String {
        let widths: Vec<usize> = self
            .classes
            .iter()
            .map(|c| c.class.len().max(5))
            .chain(std::iter::once(8))
            .collect();
        let mut head = String::new();
        let mut vals = String::new();
        for (c, w) in self.classes.iter().zip(&widths) {
            let _ = write!(head, "{:>w$} ", c.class);
            let _ = write!(vals, "{:>w$.1} ", c.iou * 100.0);
        }
        let w = widths[widths.len() - 1];
        let _ = write!(head, "{:>w$}", "mean-IoU");
        let _ = write!(vals, "{:>w$.1}", self.mean_iou * 100.0);
        format!(
            "{head}\n{vals}\n({} frames, {} scored points)\n",
            self.frames, self.points
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Inverse log-frequency weights for the cross-entropy loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

pub const CE_EPSILON: f64 = 0.02;
const LOG_FLOOR: f64 = 1e-6;

/// `w_c = 1 / max(|ln(f_c + ε)|, 1e-6)`, so the largest weight is 1e6.
pub fn class_weights(frequencies: &[f64]) -> ClassWeights {
    ClassWeights {
        weights: frequencies
            .iter()
            .map(|&f| 1.0 / (f + CE_EPSILON).ln().abs().max(LOG_FLOOR))
            .collect(),
    }
}

/// Per-class fractions of a label histogram.
pub fn frequencies(histogram: &[u64]) -> Vec<f64> {
    let total: u64 = histogram.iter().sum();
    histogram
        .iter()
        .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
        .collect()
}

fn check_dense(t: &Tensor, gt: &LabelImage) -> Result<()> {
    if (t.height(), t.width()) != gt.shape() {
        return Err(Error::Input(format!(
            "scores are {}×{} but labels are {:?}",
            t.height(),
            t.width(),
            gt.shape()
        )));
    }
    if let Some(&bad) = gt.as_slice().iter().find(|&&l| l as usize >= t.channels()) {
        return Err(Error::Input(format!("label {bad} has no score channel")));
    }
    Ok(())
}

/// Mean of `w_gt · −ln softmax(logits)_gt` over pixels with `gt ≠ 0`.
pub fn weighted_cross_entropy(logits: &Tensor, gt: &LabelImage, w: &ClassWeights) -> Result<f64> {
    check_dense(logits, gt)?;
    if w.weights.len() < logits.channels() {
        return Err(Error::Input(format!(
            "{} class weights for {} channels",
            w.weights.len(),
            logits.channels()
        )));
    }
    let plane = logits.plane_len();
    let data = logits.data();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (i, &g) in gt.as_slice().iter().enumerate() {
        if g == 0 {
            continue;
        }
        let z = |c: usize| data[c * plane + i] as f64;
        let max = (0..logits.channels()).map(z).fold(f64::NEG_INFINITY, f64::max);
        let lse = (0..logits.channels()).map(|c| (z(c) - max).exp()).sum::<f64>().ln();
        sum += w.weights[g as usize] * (lse - (z(g as usize) - max));
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Lovász extension of the Jaccard loss for one class.
///
/// `errors[i]` is the pixel's error for the class and `fg[i]` whether the
/// pixel belongs to it.
fn lovasz_class(errors: &[f64], fg: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev_j = 0.0;
    let mut loss = 0.0;
    for &i in &order {
        if fg[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let j = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        loss += errors[i] * (j - prev_j);
        prev_j = j;
    }
    loss
}

/// Lovász-Softmax over the classes present in `gt`, averaged.
pub fn lovasz_softmax(probs: &Tensor, gt: &LabelImage) -> Result<f64> {
    check_dense(probs, gt)?;
    let plane = probs.plane_len();
    let pixels: Vec<usize> = (0..plane).filter(|&i| gt.as_slice()[i] != 0).collect();
    let mut present = [false; 256];
    for &i in &pixels {
        present[gt.as_slice()[i] as usize] = true;
    }
    let mut total = 0.0;
    let mut classes = 0usize;
    for c in (1..probs.channels()).filter(|&c| present[c]) {
        let p = probs.plane(c);
        let fg: Vec<bool> = pixels.iter().map(|&i| gt.as_slice()[i] as usize == c).collect();
        let errors: Vec<f64> = pixels
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| {
                let p = p[i] as f64;
                if f {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        total += lovasz_class(&errors, &fg);
        classes += 1;
    }
    Ok(if classes == 0 { 0.0 } else { total / classes as f64 })
}

/// Channel-wise softmax at every pixel.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (c, h, w) = logits.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(c, h, w);
    let src = logits.data();
    let dst = out.data_mut();
    for i in 0..plane {
        let max = (0..c).map(|k| src[k * plane + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for k in 0..c {
            let e = (src[k * plane + i] - max).exp();
            dst[k * plane + i] = e;
            sum += e;
        }
        for k in 0..c {
            dst[k * plane + i] /= sum;
        }
    }
    out
}

/// One-hot scores for a label image, `channels` deep.
pub fn one_hot(labels: &LabelImage, channels: usize) -> Tensor {
    let (h, w) = labels.shape();
    let mut t = Tensor::zeros(channels, h, w);
    let plane = h * w;
    for (i, &l) in labels.as_slice().iter().enumerate() {
        t.data_mut()[l as usize * plane + i] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_tally() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[1, 2, 2], &[1, 1, 2]).unwrap();
        assert_eq!((cm.count(1, 1), cm.count(1, 2), cm.count(2, 2)), (1, 1, 1));
        assert_eq!(cm.total(), 3);
        let iou = cm.per_class_iou();
        assert_eq!((iou[0], iou[1]), (0.5, 0.5));
        assert!(iou[2..].iter().all(|&v| v == 0.0));
        assert_eq!(cm.mean_iou(), 1.0 / 19.0);
    }

    #[test]
    fn ignore_and_errors() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[3, 4, 5], &[0, 0, 0]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new());
        assert_eq!(cm.mean_iou(), 0.0);
        assert!(matches!(cm.accumulate(&[1], &[1, 2]), Err(Error::Input(_))));
        assert!(matches!(cm.accumulate(&[20], &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn perfect_predictions() {
        let labels: Vec<u8> = (1..20).chain(1..10).collect();
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&labels, &labels).unwrap();
        assert!(cm.per_class_iou().iter().all(|&v| v == 1.0));
        assert_eq!(cm.mean_iou(), 1.0);
    }

    #[test]
    fn weight_examples() {
        let w = class_weights(&[0.98, 0.0, 0.3, 0.3]).weights;
        assert_eq!(w[0], 1e6);
        assert!((w[1] - 1.0 / 0.02f64.ln().abs()).abs() < 1e-15);
        assert!((w[1] - 0.25562).abs() < 1e-5);
        assert_eq!(w[2], w[3]);
        assert!(w.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn uniform_logits_give_ln_20() {
        let logits = Tensor::zeros(20, 2, 3);
        let gt = LabelImage::from_vec(2, 3, vec![1, 2, 3, 0, 19, 7]);
        let w = ClassWeights { weights: vec![1.0; 20] };
        let l = weighted_cross_entropy(&logits, &gt, &w).unwrap();
        assert!((l - 20f64.ln()).abs() < 1e-12);
        let w2 = ClassWeights { weights: vec![2.0; 20] };
        assert!((weighted_cross_entropy(&logits, &gt, &w2).unwrap() - 2.0 * l).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let gt = LabelImage::from_vec(1, 2, vec![4, 9]);
        let mut logits = one_hot(&gt, 20);
        for v in logits.data_mut() {
            *v *= 60.0;
        }
        let w = ClassWeights { weights: vec![1.0; 20] };
        assert!(weighted_cross_entropy(&logits, &gt, &w).unwrap() < 1e-20);
    }

    #[test]
    fn lovasz_two_pixel_hand_case() {
        // classes 1 and 2, gt = [1, 2], p(1) = [0.75, 0.375], p(2) = [0.25, 0.625]
        let probs = Tensor::from_vec(3, 1, 2, vec![0.0, 0.0, 0.75, 0.375, 0.25, 0.625]);
        let gt = LabelImage::from_vec(1, 2, vec![1, 2]);
        // class 1: errors [0.25 fg, 0.375 bg] sorted → [0.375 bg, 0.25 fg];
        // J = [1 − 1/2, 1 − 0/2] = [0.5, 1]; g = [0.5, 0.5]; loss 0.3125
        // class 2: errors [0.25 bg, 0.375 fg] sorted → [0.375 fg, 0.25 bg];
        // J = [1 − 0/1, 1 − 0/2] = [1, 1]; g = [1, 0]; loss 0.375
        let l = lovasz_softmax(&probs, &gt).unwrap();
        assert!((l - 0.34375).abs() < 1e-9, "{l}");
    }

    #[test]
    fn lovasz_perfect_is_zero() {
        let gt = LabelImage::from_vec(2, 2, vec![1, 3, 0, 3]);
        assert_eq!(lovasz_softmax(&one_hot(&gt, 5), &gt).unwrap(), 0.0);
    }

    #[test]
    fn lovasz_hard_predictions_match_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..=64);
            let k = rng.gen_range(2..=5u8);
            let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let gt_img = LabelImage::from_vec(1, n, gt.clone());
            let loss = lovasz_softmax(&one_hot(&LabelImage::from_vec(1, n, pred.clone()), 20), &gt_img).unwrap();
            let mut cm = ConfusionMatrix::new();
            cm.accumulate(&pred, &gt).unwrap();
            let iou = cm.per_class_iou();
            let present: Vec<usize> = (1..20).filter(|&c| gt.contains(&(c as u8))).collect();
            let expect = if present.is_empty() {
                0.0
            } else {
                present.iter().map(|&c| 1.0 - iou[c - 1]).sum::<f64>() / present.len() as f64
            };
            assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        }
    }

    #[test]
    fn report_formats() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[1, 2, 2], &[1, 1, 2]).unwrap();
        let r = EvalReport::new(&cm, &ClassRemap::semantic_kitti(), 1);
        let table = r.to_table();
        let mut lines = table.lines();
        assert!(lines.next().unwrap().starts_with("  car"));
        assert!(lines.next().unwrap().contains("50.0"));
        assert!(table.contains("5.3"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn merge_equals_monolithic(labels in prop::collection::vec((0u8..20, 0u8..20), 0..300), cut in 0usize..300) {
            let (pred, gt): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
            let cut = cut.min(pred.len());
            let mut whole = ConfusionMatrix::new();
            whole.accumulate(&pred, &gt).unwrap();
            let mut a = ConfusionMatrix::new();
            let mut b = ConfusionMatrix::new();
            a.accumulate(&pred[..cut], &gt[..cut]).unwrap();
            b.accumulate(&pred[cut..], &gt[cut..]).unwrap();
            let mut ba = b.clone();
            a.merge(&b);
            ba.merge(&{ let mut x = ConfusionMatrix::new(); x.accumulate(&pred[..cut], &gt[..cut]).unwrap(); x });
            prop_assert_eq!(&a, &whole);
            prop_assert_eq!(&ba, &whole);
            for v in whole.per_class_iou() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn cross_entropy_shift_invariant(vals in prop::collection::vec(-5.0f32..5.0, 20 * 4), shift in -50.0f32..50.0) {
            let logits = Tensor::from_vec(20, 2, 2, vals.clone());
            let mut shifted = logits.clone();
            for v in shifted.data_mut() {
                *v += shift;
            }
            let gt = LabelImage::from_vec(2, 2, vec![1, 5, 0, 19]);
            let w = class_weights(&[0.05; 20]);
            let a = weighted_cross_entropy(&logits, &gt, &w).unwrap();
            let b = weighted_cross_entropy(&shifted, &gt, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-4 * a.max(1.0));
        }
    }
}
