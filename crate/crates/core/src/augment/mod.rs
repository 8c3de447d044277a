//! Online data augmentation: seeded sampling of spatial, appearance and
//! quality transforms, applied identically to an image and its labels.

mod intensity;
mod spatial;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use intensity::{apply_blur, apply_clahe, apply_clahe_with, apply_gamma, apply_noise, apply_sharpen, gaussian_blur, gaussian_blur_axes};
pub use spatial::{warp, AffineParams, ElasticField};

use crate::volume::{LabelMap, Volume};
use crate::{Error, Result};

/// Probability that each transform family is applied in one draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Probabilities {
    /// One of affine, elastic or affine+elastic (chosen uniformly).
    pub spatial: f64,
    pub clahe: f64,
    pub gamma: f64,
    pub blur: f64,
    pub sharpen: f64,
    pub noise: f64,
}

impl Default for Probabilities {
    fn default() -> Self {
        Probabilities {
            spatial: 0.5,
            clahe: 0.5,
            gamma: 0.5,
            blur: 0.5,
            sharpen: 0.5,
            noise: 0.5,
        }
    }
}

impl Probabilities {
    pub fn none() -> Self {
        Probabilities {
            spatial: 0.0,
            clahe: 0.0,
            gamma: 0.0,
            blur: 0.0,
            sharpen: 0.0,
            noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub affine_angle_range: [f64; 2],
    pub affine_scale_range: [f64; 2],
    pub elastic_control_points: usize,
    /// Per-control-point displacement bound, in voxels.
    pub elastic_max_displacement: f64,
    pub gamma_range: [f64; 2],
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma: f64,
    pub sharpen_alpha: f64,
    pub sharpen_sigma: f64,
    pub probabilities: Probabilities,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            affine_angle_range: [-10.0, 10.0],
            affine_scale_range: [0.9, 1.2],
            elastic_control_points: 7,
            elastic_max_displacement: 6.0,
            gamma_range: [0.5, 2.0],
            blur_sigma_range: [0.5, 1.5],
            noise_sigma: 0.01,
            sharpen_alpha: 10.0,
            sharpen_sigma: 1.5,
            probabilities: Probabilities::default(),
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// Same ranges, nothing ever applied.
    pub fn disabled() -> Self {
        AugmentationSpec {
            probabilities: Probabilities::none(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, r) in [
            ("affine_angle_range", self.affine_angle_range),
            ("affine_scale_range", self.affine_scale_range),
            ("gamma_range", self.gamma_range),
            ("blur_sigma_range", self.blur_sigma_range),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(format!("{name} must be an ordered pair, got {r:?}"));
            }
        }
        if self.affine_scale_range[0] <= 0.0 || self.gamma_range[0] <= 0.0 || self.blur_sigma_range[0] <= 0.0 {
            return bad("scale, gamma and blur sigma ranges must be positive".into());
        }
        if self.elastic_control_points < 2 {
            return bad("elastic_control_points must be at least 2".into());
        }
        if !(self.elastic_max_displacement >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.sharpen_sigma > 0.0) || !(self.sharpen_alpha >= 0.0) {
            return bad("displacement, noise, sharpen parameters must be non-negative (sharpen sigma positive)".into());
        }
        let p = self.probabilities;
        for (name, v) in [
            ("spatial", p.spatial),
            ("clahe", p.clahe),
            ("gamma", p.gamma),
            ("blur", p.blur),
            ("sharpen", p.sharpen),
            ("noise", p.noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("probability {name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Seed of data-loader worker `worker` for a run seeded with `seed`.
pub fn worker_seed(seed: u64, worker: u64) -> u64 {
    seed ^ worker
}

/// One concrete draw. `None` / `false` means the transform is skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationInstance {
    pub affine: Option<AffineParams>,
    pub elastic: Option<ElasticField>,
    pub clahe: bool,
    pub gamma: Option<f64>,
    pub blur_sigma: Option<f64>,
    /// `(alpha, sigma)`
    pub sharpen: Option<(f64, f64)>,
    /// `(sigma, rng seed)`
    pub noise: Option<(f64, u64)>,
}

impl AugmentationInstance {
    pub fn identity() -> Self {
        AugmentationInstance {
            affine: None,
            elastic: None,
            clahe: false,
            gamma: None,
            blur_sigma: None,
            sharpen: None,
            noise: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        // still consume a value so the stream layout never depends on ranges
        let _: f64 = rng.random();
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Deterministic draw number `index` for `spec`. Every random quantity is
/// drawn whether or not its transform ends up active, so toggling one
/// probability does not reshuffle the others.
pub fn sample(spec: &AugmentationSpec, index: u64) -> AugmentationInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let p = &spec.probabilities;

    let spatial_roll: f64 = rng.random();
    let variant = rng.random_range(0..3u8);
    let angles = [0; 3].map(|_| uniform(&mut rng, spec.affine_angle_range));
    let scale = uniform(&mut rng, spec.affine_scale_range);
    let n = spec.elastic_control_points;
    let m = spec.elastic_max_displacement;
    let displacements: Vec<[f64; 3]> = (0..n * n * n)
        .map(|_| {
            let mut d = [0; 3].map(|_| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 });
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if norm > m {
                d.iter_mut().for_each(|c| *c *= m / norm);
            }
            d
        })
        .collect();
    let clahe_roll: f64 = rng.random();
    let gamma_roll: f64 = rng.random();
    let gamma = uniform(&mut rng, spec.gamma_range);
    let blur_roll: f64 = rng.random();
    let blur = uniform(&mut rng, spec.blur_sigma_range);
    let sharpen_roll: f64 = rng.random();
    let noise_roll: f64 = rng.random();
    let noise_seed: u64 = rng.random();

    let spatial = spatial_roll < p.spatial;
    let use_affine = spatial && variant != 1;
    let use_elastic = spatial && variant != 0;
    AugmentationInstance {
        affine: use_affine.then_some(AffineParams { angles_deg: angles, scale }),
        elastic: use_elastic.then_some(ElasticField { points: n, displacements }),
        clahe: clahe_roll < p.clahe,
        gamma: (gamma_roll < p.gamma).then_some(gamma),
        blur_sigma: (blur_roll < p.blur).then_some(blur),
        sharpen: (sharpen_roll < p.sharpen).then_some((spec.sharpen_alpha, spec.sharpen_sigma)),
        noise: (noise_roll < p.noise && spec.noise_sigma > 0.0).then_some((spec.noise_sigma, noise_seed)),
    }
}

/// Spatial part only.
pub fn apply_spatial(v: &Volume, l: &LabelMap, inst: &AugmentationInstance) -> Result<(Volume, LabelMap)> {
    warp(v, l, inst.affine.as_ref(), inst.elastic.as_ref())
}

/// Appearance and quality part: CLAHE, gamma, blur, sharpen, noise, in that
/// order, result clamped to [0, 1].
pub fn apply_intensity(v: &Volume, inst: &AugmentationInstance) -> Result<Volume> {
    let mut out = v.clone();
    let mut touched = false;
    if inst.clahe {
        out = apply_clahe(&out)?;
        touched = true;
    }
    if let Some(g) = inst.gamma {
        out = apply_gamma(&out, g)?;
        touched = true;
    }
    if let Some(s) = inst.blur_sigma {
        out = apply_blur(&out, s)?;
        touched = true;
    }
    if let Some((alpha, sigma)) = inst.sharpen {
        out = apply_sharpen(&out, alpha, sigma)?;
        touched = true;
    }
    if let Some((sigma, seed)) = inst.noise {
        out = apply_noise(&out, sigma, &mut ChaCha8Rng::seed_from_u64(seed))?;
        touched = true;
    }
    if touched {
        out = out.map(|x| x.clamp(0.0, 1.0))?;
    }
    Ok(out)
}

/// Full augmentation of one (image, labels) pair.
pub fn apply(v: &Volume, l: &LabelMap, inst: &AugmentationInstance) -> Result<(Volume, LabelMap)> {
    let (v, l) = apply_spatial(v, l, inst)?;
    Ok((apply_intensity(&v, inst)?, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic() {
        let spec = AugmentationSpec {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(sample(&spec, 7), sample(&spec, 7));
        assert_ne!(sample(&spec, 7), sample(&spec, 8));
    }

    #[test]
    fn zero_probabilities_give_identity() {
        let spec = AugmentationSpec::disabled();
        for i in 0..50 {
            assert!(sample(&spec, i).is_identity());
        }
    }

    #[test]
    fn gamma_draws_stay_in_range() {
        let spec = AugmentationSpec {
            seed: 3,
            elastic_control_points: 2,
            ..Default::default()
        };
        let mut seen = 0;
        for i in 0..10_000 {
            if let Some(g) = sample(&spec, i).gamma {
                assert!((0.5..=2.0).contains(&g));
                seen += 1;
            }
        }
        assert!(seen > 4000 && seen < 6000);
    }

    #[test]
    fn at_most_one_spatial_variant_and_bounded_displacement() {
        let spec = AugmentationSpec {
            seed: 9,
            probabilities: Probabilities {
                spatial: 1.0,
                ..Probabilities::none()
            },
            ..Default::default()
        };
        let mut kinds = [0; 3];
        for i in 0..60 {
            let inst = sample(&spec, i);
            let k = match (&inst.affine, &inst.elastic) {
                (Some(_), None) => 0,
                (None, Some(_)) => 1,
                (Some(_), Some(_)) => 2,
                (None, None) => panic!("spatial probability 1 produced nothing"),
            };
            kinds[k] += 1;
            if let Some(e) = &inst.elastic {
                assert!(e.displacements.iter().all(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= 6.0 + 1e-9));
            }
        }
        assert!(kinds.iter().all(|&k| k > 0));
    }

    #[test]
    fn spec_validation() {
        let mut s = AugmentationSpec::default();
        assert!(s.validate().is_ok());
        s.gamma_range = [2.0, 0.5];
        assert!(s.validate().is_err());
        let mut s = AugmentationSpec::default();
        s.probabilities.noise = 1.5;
        assert!(s.validate().is_err());
    }
}
