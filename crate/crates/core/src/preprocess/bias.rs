//! Multiplicative bias field estimation in log space.

use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur_axes;
use crate::volume::Volume;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasConfig {
    pub iterations: usize,
    /// Tissue classes of the piecewise-constant intensity model.
    pub classes: usize,
    /// Smoothing scale of the log field, mm.
    pub smoothing_mm: f64,
    /// Voxels above this fraction of the 99th percentile form the
    /// estimation mask.
    pub mask_fraction: f64,
    /// Voxels whose log-intensity gradient (per voxel step) exceeds this
    /// are left out of the estimate; they sit on tissue boundaries.
    pub edge_threshold: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            iterations: 24,
            classes: 3,
            smoothing_mm: 12.0,
            mask_fraction: 0.1,
            edge_threshold: 0.1,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || self.classes == 0
            || !(self.smoothing_mm > 0.0)
            || !(0.0..1.0).contains(&self.mask_fraction)
            || !(self.edge_threshold > 0.0)
        {
            return Err(Error::Config(
                "bias correction needs iterations ≥ 1, classes ≥ 1, smoothing_mm > 0, mask_fraction in [0, 1), edge_threshold > 0"
                    .into(),
            ));
        }
        Ok(())
    }
}

fn percentile(values: &[f32], q: f64) -> f32 {
    let mut v = values.to_vec();
    let k = ((v.len() - 1) as f64 * q).round() as usize;
    let (_, x, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *x
}

/// One-dimensional k-means on the masked log intensities; returns the
/// fitted class mean for every masked sample.
fn piecewise_constant(values: &[f64], k: usize) -> Vec<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mut centers: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / k as f64).collect();
    let mut assign = vec![0usize; values.len()];
    for _ in 0..20 {
        for (a, &x) in assign.iter_mut().zip(values) {
            *a = (0..k)
                .min_by(|&i, &j| (x - centers[i]).abs().total_cmp(&(x - centers[j]).abs()))
                .unwrap_or(0);
        }
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (&a, &x) in assign.iter().zip(values) {
            sum[a] += x;
            cnt[a] += 1;
        }
        for i in 0..k {
            if cnt[i] > 0 {
                centers[i] = sum[i] / cnt[i] as f64;
            }
        }
    }
    assign.iter().map(|&a| centers[a]).collect()
}

/// Positive voxels whose 6 neighbours are all positive and whose largest
/// central-difference log gradient stays below `threshold`.
fn smooth_voxels(shape: [usize; 3], data: &[f32], positive: &[bool], threshold: f64) -> Vec<bool> {
    let [nx, ny, nz] = shape;
    let strides = [1, nx, nx * ny];
    let mut out = vec![false; data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !positive[i] {
                    continue;
                }
                let pos = [x, y, z];
                let mut ok = true;
                for a in 0..3 {
                    if shape[a] < 3 {
                        continue;
                    }
                    let (lo, hi) = (pos[a].max(1) - 1, (pos[a] + 1).min(shape[a] - 1));
                    let (il, ih) = (i - (pos[a] - lo) * strides[a], i + (hi - pos[a]) * strides[a]);
                    if !positive[il] || !positive[ih] {
                        ok = false;
                        break;
                    }
                    let grad = ((data[ih] as f64).ln() - (data[il] as f64).ln()) / (hi - lo) as f64;
                    if grad.abs() > threshold {
                        ok = false;
                        break;
                    }
                }
                out[i] = ok;
            }
        }
    }
    out
}

/// Estimates a smooth positive field `b` with `v = out · b` voxel-wise.
///
/// Iterates: classify the current corrected log intensities into a
/// piecewise-constant tissue model, smooth the residual against that model
/// (mask-normalised Gaussian) and add it to the log field. Only positive
/// voxels away from tissue edges take part; non-positive voxels are
/// excluded rather than shifted. The log field has zero mean over the
/// estimation mask.
pub fn correct_bias_field_with(v: &Volume, cfg: &BiasConfig) -> Result<(Volume, Volume)> {
    cfg.validate()?;
    let g = v.geometry();
    let data = v.data();
    let p99 = percentile(data, 0.99);
    let ones = || v.with_data(vec![1.0; data.len()]);
    if !(p99 > 0.0) {
        return Ok((v.clone(), ones()?));
    }
    let thresh = (cfg.mask_fraction as f32 * p99).max(f32::MIN_POSITIVE);
    let positive: Vec<bool> = data.iter().map(|&x| x > thresh).collect();
    let mask = smooth_voxels(g.shape, data, &positive, cfg.edge_threshold);
    let idx: Vec<usize> = (0..data.len()).filter(|&i| mask[i]).collect();
    if idx.len() < 8 {
        return Ok((v.clone(), ones()?));
    }
    let logv: Vec<f64> = idx.iter().map(|&i| (data[i] as f64).ln()).collect();
    let sigma = g.spacing.map(|s| cfg.smoothing_mm / s);
    let mvals: Vec<f32> = mask.iter().map(|&m| m as u8 as f32).collect();
    let norm = gaussian_blur_axes(g.shape, &mvals, sigma);

    let mut log_field = vec![0f64; data.len()];
    for _ in 0..cfg.iterations {
        let corrected: Vec<f64> = idx.iter().zip(&logv).map(|(&i, &l)| l - log_field[i]).collect();
        let model = piecewise_constant(&corrected, cfg.classes);
        let mut resid = vec![0f32; data.len()];
        for ((&i, &c), &m) in idx.iter().zip(&corrected).zip(&model) {
            resid[i] = (c - m) as f32;
        }
        let smooth = gaussian_blur_axes(g.shape, &resid, sigma);
        for i in 0..data.len() {
            if norm[i] > 1e-3 {
                log_field[i] += smooth[i] as f64 / norm[i] as f64;
            }
        }
        let mean = idx.iter().map(|&i| log_field[i]).sum::<f64>() / idx.len() as f64;
        log_field.iter_mut().for_each(|f| *f -= mean);
    }
    let field: Vec<f32> = log_field.iter().map(|f| f.exp() as f32).collect();
    let out: Vec<f32> = data.iter().zip(&field).map(|(&x, &b)| x / b).collect();
    Ok((v.with_data(out)?, v.with_data(field)?))
}

/// [`correct_bias_field_with`] using the default configuration.
pub fn correct_bias_field(v: &Volume) -> Result<(Volume, Volume)> {
    correct_bias_field_with(v, &BiasConfig::default())
}
