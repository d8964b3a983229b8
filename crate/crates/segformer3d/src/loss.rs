//! Dice and cross-entropy losses, their equally weighted combination, and
//! the hard Dice metric used for evaluation.
//!
//! The differentiable losses live on the autodiff tape (see
//! [`crate::tensor::ops`]); this module adds the configuration type, the
//! combined loss, and the non-differentiable label-space metric.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};
use serde::{Deserialize, Serialize};

/// Settings for the soft dice loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftDiceConfig {
    /// Smoothing term added to both numerator and denominator.
    pub smooth: f32,
    /// Whether class 0 participates in the per-class mean.
    pub include_background: bool,
}

impl Default for SoftDiceConfig {
    fn default() -> Self {
        SoftDiceConfig { smooth: 1e-5, include_background: false }
    }
}

impl SoftDiceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth > 0.0) {
            return Err(Error::Config(format!("smooth must be > 0, got {}", self.smooth)));
        }
        Ok(())
    }
}

/// Soft dice loss: softmax over classes, smoothed per-class dice,
/// `1 - mean` over the included classes.
///
/// `logits` is `[B, K, ...]` channels-first; `target` holds one label per
/// voxel in row-major `[B, ...]` order.
pub fn dice_loss(logits: &Tensor, target: &[u8], cfg: &SoftDiceConfig) -> Result<Tensor> {
    cfg.validate()?;
    ops::dice_loss(logits, target, cfg.smooth, cfg.include_background)
}

/// Mean over voxels of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, target: &[u8]) -> Result<Tensor> {
    ops::cross_entropy(logits, target)
}

/// Equally weighted combination: `0.5 * dice_loss + 0.5 * cross_entropy`.
pub fn dice_ce_loss(logits: &Tensor, target: &[u8], cfg: &SoftDiceConfig) -> Result<Tensor> {
    let d = dice_loss(logits, target, cfg)?;
    let c = cross_entropy(logits, target)?;
    ops::add(&ops::scale(&d, 0.5), &ops::scale(&c, 0.5))
}

/// Argmax over the class axis: logits `[B, K, ...]` to labels `[B, ...]`.
/// Ties resolve to the lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let shape = logits.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "argmax needs [batch, classes, ...], got {shape:?}"
        )));
    }
    let (bsz, k) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    if k == 0 || k > u8::MAX as usize + 1 {
        return Err(Error::ShapeMismatch(format!("class count {k} not representable as u8")));
    }
    Ok(logits.with_data(|z| {
        let mut labels = vec![0u8; bsz * n];
        for b in 0..bsz {
            for v in 0..n {
                let mut best = 0usize;
                let mut best_val = z[(b * k) * n + v];
                for c in 1..k {
                    let val = z[(b * k + c) * n + v];
                    if val > best_val {
                        best_val = val;
                        best = c;
                    }
                }
                labels[b * n + v] = best as u8;
            }
        }
        labels
    }))
}

/// Hard Dice `2|A∩B| / (|A| + |B|)` per foreground class, plus the mean over
/// foreground classes. A class absent from both masks scores 1.0. Background
/// (class 0) is excluded from both the per-class list and the mean.
pub fn dice_score(pred: &[u8], target: &[u8], num_classes: usize) -> Result<(Vec<f32>, f32)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred has {} voxels, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::ShapeMismatch(format!(
            "dice score needs >= 2 classes, got {num_classes}"
        )));
    }
    let mut inter = vec![0u64; num_classes];
    let mut pcount = vec![0u64; num_classes];
    let mut tcount = vec![0u64; num_classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p as usize >= num_classes {
            return Err(Error::LabelOutOfRange { label: p as usize, classes: num_classes });
        }
        if t as usize >= num_classes {
            return Err(Error::LabelOutOfRange { label: t as usize, classes: num_classes });
        }
        pcount[p as usize] += 1;
        tcount[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<f32> = (1..num_classes)
        .map(|c| {
            let denom = pcount[c] + tcount[c];
            if denom == 0 {
                1.0
            } else {
                (2.0 * inter[c] as f64 / denom as f64) as f32
            }
        })
        .collect();
    let mean = (per_class.iter().map(|&d| d as f64).sum::<f64>() / per_class.len() as f64) as f32;
    Ok((per_class, mean))
}
