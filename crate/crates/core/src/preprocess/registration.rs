//! Rigid registration by mutual information, coarse to fine.

use serde::{Deserialize, Serialize};

use super::{euler_rotation, RigidTransform};
use crate::augment::gaussian_blur_axes;
use crate::volume::{mat_vec, resample, transpose, Interpolation, Mat3, Volume};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    /// Pyramid levels; level `k` (0 = finest) downsamples by `2^k` in-plane.
    pub levels: usize,
    pub bins: usize,
    /// Gradient steps per level.
    pub max_iterations: usize,
    /// Initial step per level (finest level), mm.
    pub initial_step_mm: f64,
    /// Convergence threshold on the step length, mm.
    pub min_step_mm: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            bins: 32,
            max_iterations: 300,
            initial_step_mm: 1.0,
            min_step_mm: 0.005,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.bins < 4 || self.max_iterations == 0 {
            return Err(Error::Config("registration needs levels ≥ 1, bins ≥ 4, max_iterations ≥ 1".into()));
        }
        if !(self.initial_step_mm > self.min_step_mm) || !(self.min_step_mm > 0.0) {
            return Err(Error::Config("registration steps must satisfy initial_step_mm > min_step_mm > 0".into()));
        }
        Ok(())
    }
}

/// Intensities rescaled to [0, 1].
fn unit_range(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(Error::InvalidArgument("registration input is constant".into()));
    }
    let s = 1.0 / (hi - lo);
    v.map(|x| (x - lo) * s)
}

/// Smoothed, subsampled copy with in-plane factor `f`; the slice axis is
/// only reduced while it keeps at least 8 samples.
fn downsample(v: &Volume, f: usize) -> Result<Volume> {
    if f == 1 {
        return Ok(v.clone());
    }
    let g = v.geometry();
    let factors = [0, 1, 2].map(|a| {
        let mut fa = f;
        while fa > 1 && g.shape[a] / fa < 8 {
            fa /= 2;
        }
        fa
    });
    let sig = factors.map(|fa| if fa > 1 { 0.5 * fa as f64 } else { 0.0 });
    let blurred = v.with_data(gaussian_blur_axes(g.shape, v.data(), sig))?;
    let shape = [0, 1, 2].map(|a| g.shape[a].div_ceil(factors[a]).max(1));
    let spacing = [0, 1, 2].map(|a| g.spacing[a] * g.shape[a] as f64 / shape[a] as f64);
    resample(&blurred, shape, spacing, Interpolation::Linear)
}

fn weighted_center(v: &Volume) -> [f64; 3] {
    let (lo, _) = v.min_max();
    let g = v.geometry();
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (i, &x) in v.data().iter().enumerate() {
        let w = (x - lo) as f64;
        if w > 0.0 {
            let c = g.coords(i);
            let p = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            for a in 0..3 {
                acc[a] += w * p[a];
            }
            total += w;
        }
    }
    if total == 0.0 {
        return g.center();
    }
    acc.map(|s| s / total)
}

struct Level {
    moving: Volume,
    /// Fixed-grid sample positions (world, mm) with their tent-binned
    /// intensities `(bin, weight of bin + 1)`.
    samples: Vec<([f64; 3], usize, f64)>,
    spacing: f64,
}

impl Level {
    fn new(fixed: &Volume, moving: &Volume, bins: usize) -> Level {
        let g = fixed.geometry();
        let top = (bins - 1) as f64;
        let samples = fixed
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = g.coords(i);
                let p = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
                let b = (x as f64).clamp(0.0, 1.0) * top;
                let i0 = (b.floor() as usize).min(bins - 2);
                (p, i0, b - i0 as f64)
            })
            .collect();
        Level {
            moving: moving.clone(),
            samples,
            spacing: g.spacing.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Parameters: rotation angles (rad) about the fixed centre `c`, then a
/// translation (mm); `T(p) = R (p − c) + c + t` maps moving world into
/// fixed world.
struct Problem {
    center: [f64; 3],
    bins: usize,
    /// mm per radian used to put rotations and translations on one scale.
    radius: f64,
}

impl Problem {
    fn transform(&self, u: &[f64; 6]) -> RigidTransform {
        let r = euler_rotation([u[0] / self.radius, u[1] / self.radius, u[2] / self.radius]);
        let rc = mat_vec(&r, self.center);
        RigidTransform {
            rotation: r,
            translation: [0, 1, 2].map(|a| self.center[a] + u[3 + a] - rc[a]),
        }
    }

    fn mutual_information(&self, level: &Level, u: &[f64; 6]) -> f64 {
        let inv = self.transform(u).inverse();
        let mg = level.moving.geometry();
        // fixed world → moving voxel, as one affine map
        let dt = transpose(&mg.direction);
        let mut lin: Mat3 = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                lin[r][c] = (0..3).map(|k| dt[r][k] * inv.rotation[k][c]).sum::<f64>() / mg.spacing[r];
            }
        }
        let shifted = [0, 1, 2].map(|a| inv.translation[a] - mg.origin[a]);
        let off = mat_vec(&dt, shifted);
        let off = [0, 1, 2].map(|a| off[a] / mg.spacing[a]);

        let b = self.bins;
        let top = (b - 1) as f64;
        let shape = mg.shape;
        let hi = shape.map(|n| (n - 1) as f64 + 1e-9);
        let data = level.moving.data();
        let mut joint = vec![0f64; b * b];
        for &(p, fi, fw) in &level.samples {
            let v = mat_vec(&lin, p);
            let v = [v[0] + off[0], v[1] + off[1], v[2] + off[2]];
            if (0..3).any(|a| v[a] < -1e-9 || v[a] > hi[a]) {
                continue;
            }
            let m = crate::volume::sample_linear(shape, data, v) as f64;
            let mb = m.clamp(0.0, 1.0) * top;
            let mi = (mb.floor() as usize).min(b - 2);
            let mw = mb - mi as f64;
            let row0 = fi * b;
            let row1 = (fi + 1) * b;
            joint[row0 + mi] += (1.0 - fw) * (1.0 - mw);
            joint[row0 + mi + 1] += (1.0 - fw) * mw;
            joint[row1 + mi] += fw * (1.0 - mw);
            joint[row1 + mi + 1] += fw * mw;
        }
        let total: f64 = joint.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut pf = vec![0f64; b];
        let mut pm = vec![0f64; b];
        for i in 0..b {
            for j in 0..b {
                let p = joint[i * b + j] / total;
                pf[i] += p;
                pm[j] += p;
            }
        }
        let mut mi = 0.0;
        for i in 0..b {
            for j in 0..b {
                let p = joint[i * b + j] / total;
                if p > 0.0 {
                    mi += p * (p / (pf[i] * pm[j])).ln();
                }
            }
        }
        mi
    }
}

/// Finds the rigid transform mapping `moving` into the world frame of
/// `fixed` by maximising mutual information. Starts from aligned
/// intensity-weighted centres; each pyramid level runs a regular-step
/// gradient ascent with central-difference gradients.
pub fn register_rigid_with(moving: &Volume, fixed: &Volume, cfg: &RegistrationConfig) -> Result<RigidTransform> {
    cfg.validate()?;
    let fixed_n = unit_range(fixed)?;
    let moving_n = unit_range(moving)?;
    let fg = fixed.geometry();
    let extent = [0, 1, 2].map(|a| fg.spacing[a] * fg.shape[a] as f64);
    let problem = Problem {
        center: fg.center(),
        bins: cfg.bins,
        radius: 0.25 * (extent[0] * extent[0] + extent[1] * extent[1] + extent[2] * extent[2]).sqrt(),
    };
    let cf = weighted_center(&fixed_n);
    let cm = weighted_center(&moving_n);
    let mut u = [0.0, 0.0, 0.0, cf[0] - cm[0], cf[1] - cm[1], cf[2] - cm[2]];

    let mut value = f64::NAN;
    for level in (0..cfg.levels).rev() {
        let f = 1usize << level;
        let lv = Level::new(&downsample(&fixed_n, f)?, &downsample(&moving_n, f)?, cfg.bins);
        let h = 0.1 * lv.spacing;
        let mut step = cfg.initial_step_mm * f as f64;
        value = problem.mutual_information(&lv, &u);
        let mut converged = false;
        for _ in 0..cfg.max_iterations {
            let mut grad = [0.0; 6];
            for k in 0..6 {
                let (mut up, mut dn) = (u, u);
                up[k] += h;
                dn[k] -= h;
                grad[k] = (problem.mutual_information(&lv, &up) - problem.mutual_information(&lv, &dn)) / (2.0 * h);
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                converged = true;
                break;
            }
            let mut cand = u;
            for k in 0..6 {
                cand[k] += step * grad[k] / norm;
            }
            let cv = problem.mutual_information(&lv, &cand);
            if cv > value {
                u = cand;
                value = cv;
            } else {
                step *= 0.5;
                if step < cfg.min_step_mm {
                    converged = true;
                    break;
                }
            }
        }
        log::debug!("registration level {level}: MI {value:.5}, step {step:.4} mm");
        if level == 0 && !converged {
            return Err(Error::NoConvergence { metric: value });
        }
    }
    if !(value.is_finite() && value > 0.0) {
        return Err(Error::NoConvergence { metric: value });
    }
    Ok(problem.transform(&u))
}

/// [`register_rigid_with`] using the default configuration.
pub fn register_rigid(moving: &Volume, fixed: &Volume) -> Result<RigidTransform> {
    register_rigid_with(moving, fixed, &RegistrationConfig::default())
}
