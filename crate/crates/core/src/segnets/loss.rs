use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Class weights and smoothing for the multi-class soft Dice loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of each foreground class.
    pub w_fg: f64,
    /// Weight of the background class.
    pub w_bg: f64,
    /// Added to numerator and denominator of every class Dice.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_fg: 1.0,
            w_bg: 0.1,
            epsilon: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_fg >= 0.0 && self.w_bg >= 0.0 && self.w_fg + self.w_bg > 0.0) {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("loss epsilon must be positive".into()));
        }
        Ok(())
    }

    fn weight(&self, class: usize) -> f64 {
        if class == 0 {
            self.w_bg
        } else {
            self.w_fg
        }
    }
}

/// Weighted soft Dice loss `1 − Σ w_c D_c / Σ w_c` with
/// `D_c = (2 Σ p t + ε) / (Σ p + Σ t + ε)`.
///
/// `probs` is laid out `(C, S)` for a single sample and `target` holds
/// `S` class indices. Returns the loss and its gradient with respect to
/// `probs`.
pub fn dice_loss(probs: &[f64], target: &[u8], num_classes: usize, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    dice_loss_batched(probs, target, 1, num_classes, target.len(), cfg)
}

/// [`dice_loss`] over a batch laid out `(N, C, S)`; sums run over all
/// samples before the ratio is formed.
pub fn dice_loss_batched(
    probs: &[f64],
    target: &[u8],
    n: usize,
    num_classes: usize,
    s: usize,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if probs.len() != n * num_classes * s || target.len() != n * s {
        return Err(Error::Shape(format!(
            "expected {} probabilities and {} labels, got {} and {}",
            n * num_classes * s,
            n * s,
            probs.len(),
            target.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= num_classes) {
        return Err(Error::LabelOutOfRange(bad as f64));
    }
    let eps = cfg.epsilon;
    let mut inter = vec![0f64; num_classes];
    let mut psum = vec![0f64; num_classes];
    let mut tsum = vec![0f64; num_classes];
    for i in 0..n {
        for c in 0..num_classes {
            let p = &probs[(i * num_classes + c) * s..][..s];
            let t = &target[i * s..][..s];
            for (&pv, &tv) in p.iter().zip(t) {
                psum[c] += pv;
                if tv as usize == c {
                    inter[c] += pv;
                    tsum[c] += 1.0;
                }
            }
        }
    }
    let wsum: f64 = (0..num_classes).map(|c| cfg.weight(c)).sum();
    let mut weighted = 0.0;
    // dLoss/dp for voxels inside / outside class c
    let mut g_in = vec![0f64; num_classes];
    let mut g_out = vec![0f64; num_classes];
    for c in 0..num_classes {
        let num = 2.0 * inter[c] + eps;
        let den = psum[c] + tsum[c] + eps;
        weighted += cfg.weight(c) * num / den;
        let k = -cfg.weight(c) / wsum;
        g_in[c] = k * (2.0 * den - num) / (den * den);
        g_out[c] = k * (-num) / (den * den);
    }
    let loss = 1.0 - weighted / wsum;
    let mut grad = vec![0f64; probs.len()];
    for i in 0..n {
        for c in 0..num_classes {
            let g = &mut grad[(i * num_classes + c) * s..][..s];
            let t = &target[i * s..][..s];
            for (gv, &tv) in g.iter_mut().zip(t) {
                *gv = if tv as usize == c { g_in[c] } else { g_out[c] };
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(target: &[u8], c: usize) -> Vec<f64> {
        let s = target.len();
        let mut p = vec![0.0; c * s];
        for (i, &t) in target.iter().enumerate() {
            p[t as usize * s + i] = 1.0;
        }
        p
    }

    #[test]
    fn perfect_and_disjoint_predictions() {
        let target = [0u8, 1, 2, 2, 0, 1, 1, 0];
        let cfg = LossConfig::default();
        let (perfect, _) = dice_loss(&one_hot(&target, 3), &target, 3, &cfg).unwrap();
        assert!(perfect.abs() < 1e-12);
        let shifted: Vec<u8> = target.iter().map(|t| (t + 1) % 3).collect();
        let (disjoint, _) = dice_loss(&one_hot(&shifted, 3), &target, 3, &cfg).unwrap();
        assert!(disjoint > 0.999);
    }

    #[test]
    fn absent_class_predicted_absent_counts_as_perfect() {
        let target = [0u8, 1, 1, 0];
        let (loss, _) = dice_loss(&one_hot(&target, 3), &target, 3, &LossConfig::default()).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let cfg = LossConfig::default();
        assert!(dice_loss(&[0.5; 7], &[0, 1], 3, &cfg).is_err());
        assert!(dice_loss_batched(&[0.5; 12], &[0, 1], 2, 3, 2, &cfg).is_err());
        assert!(dice_loss_batched(&[0.5; 6], &[0, 3], 1, 3, 2, &cfg).is_err());
    }
}
