//! Synthetic two-modality cohort: a head-like ellipsoid with a fluid
//! channel, an unlabelled brainstem-like blob, a VS-like ellipsoid and a
//! small cochlea-like blob. Modality B is a fixed monotone lookup of
//! modality A, so the ideal A→B translation is known exactly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::preprocess::RigidTransform;
use crate::volume::{save_labels, save_volume, Geometry, LabelMap, Volume, BACKGROUND, COCHLEA, VS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// VS semi-axis range, mm.
    pub vs_radius_range: [f64; 2],
    /// Cochlea semi-axis range, mm.
    pub cochlea_radius_range: [f64; 2],
    /// Blob centre jitter, mm (uniform in ±value per axis).
    pub position_jitter_mm: f64,
    /// Whole-anatomy rigid offset: rotation about z (±degrees) and shift (±mm).
    pub rotation_jitter_deg: f64,
    pub shift_jitter_mm: f64,
    /// Piecewise-linear A→B lookup: knots in A and their images in B, both
    /// strictly increasing.
    pub lookup_a: Vec<f64>,
    pub lookup_b: Vec<f64>,
    /// Exponent applied to B after the lookup (appearance shift).
    pub b_gamma: f64,
    pub noise_a: f64,
    pub noise_b: f64,
    /// Amplitude of the smooth multiplicative field, as log-amplitude.
    pub bias_amplitude: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [64, 32, 16],
            spacing: [1.0, 1.0, 2.0],
            seed: 0,
            vs_radius_range: [4.5, 7.0],
            cochlea_radius_range: [3.0, 4.0],
            position_jitter_mm: 2.0,
            rotation_jitter_deg: 4.0,
            shift_jitter_mm: 2.0,
            lookup_a: vec![0.0, 0.2, 0.5, 1.0],
            lookup_b: vec![0.0, 0.5, 0.75, 1.0],
            b_gamma: 1.0,
            noise_a: 0.02,
            noise_b: 0.03,
            bias_amplitude: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.shape.iter().any(|&n| n < 8) {
            return bad(format!("phantom shape must be at least 8 per axis, got {:?}", self.shape));
        }
        Geometry::new(self.shape, self.spacing).validate()?;
        for (name, r) in [("vs_radius_range", self.vs_radius_range), ("cochlea_radius_range", self.cochlea_radius_range)] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("{name} must be an ordered positive pair, got {r:?}"));
            }
        }
        let ext = self.extent();
        let need_x = 12.0 + self.vs_radius_range[1] + 2.0 * self.cochlea_radius_range[1] + 2.0 * self.position_jitter_mm;
        if need_x > ext[0] / 2.0 || self.vs_radius_range[1] + self.position_jitter_mm > ext[1].min(ext[2]) / 2.0 {
            return bad(format!("radii and jitter do not fit inside a {:?} mm field of view", ext));
        }
        let (a, b) = (&self.lookup_a, &self.lookup_b);
        if a.len() < 2 || a.len() != b.len() || a[0] != 0.0 || a[a.len() - 1] != 1.0 {
            return bad("lookup_a must run from 0 to 1 and match lookup_b in length".into());
        }
        if a.windows(2).any(|w| w[1] <= w[0]) || b.windows(2).any(|w| w[1] <= w[0]) {
            return bad("lookup knots must be strictly increasing".into());
        }
        if b.iter().any(|x| !(0.0..=1.0).contains(x)) || !(self.b_gamma > 0.0) {
            return bad("lookup_b must lie in [0, 1] and b_gamma must be positive".into());
        }
        if !(self.noise_a >= 0.0 && self.noise_b >= 0.0 && self.bias_amplitude >= 0.0) {
            return bad("noise levels and bias amplitude must be non-negative".into());
        }
        if !(self.rotation_jitter_deg >= 0.0 && self.shift_jitter_mm >= 0.0 && self.position_jitter_mm >= 0.0) {
            return bad("jitter magnitudes must be non-negative".into());
        }
        Ok(())
    }

    fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.shape[a] as f64 * self.spacing[a])
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.shape, self.spacing)
    }

    /// Noise-free A→B intensity map: the lookup followed by `b_gamma`.
    /// Monotone increasing on [0, 1].
    pub fn a_to_b(&self, x: f64) -> f64 {
        let (a, b) = (&self.lookup_a, &self.lookup_b);
        let x = x.clamp(0.0, 1.0);
        let k = a.windows(2).position(|w| x <= w[1]).unwrap_or(a.len() - 2);
        let t = (x - a[k]) / (a[k + 1] - a[k]);
        (b[k] + t * (b[k + 1] - b[k])).powf(self.b_gamma)
    }
}

/// Seed of subject `index`; distinct indices give distinct seeds.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tissue intensities in modality A.
#[derive(Clone, Debug)]
struct Levels {
    background: f64,
    tissue: f64,
    fluid: f64,
    stem: f64,
    cochlea: f64,
    vs: f64,
}

#[derive(Clone, Debug)]
struct Anatomy {
    /// Canonical (centre-relative, mm) → subject world.
    placement: RigidTransform,
    vs_center: [f64; 3],
    vs_radii: [f64; 3],
    cochlea_center: [f64; 3],
    cochlea_radii: [f64; 3],
    levels: Levels,
    bias_phase: [[f64; 3]; 2],
}

fn inside_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

impl Anatomy {
    fn canonical(cfg: &PhantomConfig) -> Anatomy {
        let vr = 0.5 * (cfg.vs_radius_range[0] + cfg.vs_radius_range[1]);
        let cr = 0.5 * (cfg.cochlea_radius_range[0] + cfg.cochlea_radius_range[1]);
        Anatomy {
            placement: RigidTransform::identity(),
            vs_center: [-2.0, 0.0, 0.0],
            vs_radii: [vr, vr * 0.85, vr * 0.75],
            cochlea_center: [10.0 + cr, 3.0, 0.0],
            cochlea_radii: [cr, cr, cr * 0.8],
            levels: Levels {
                background: 0.02,
                tissue: 0.4,
                fluid: 0.12,
                stem: 0.6,
                cochlea: 0.7,
                vs: 0.85,
            },
            bias_phase: [[0.0; 3]; 2],
        }
    }

    fn random(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Anatomy {
        let mut a = Anatomy::canonical(cfg);
        let mut u = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let angle = u(cfg.rotation_jitter_deg).to_radians();
        let shift = [u(cfg.shift_jitter_mm), u(cfg.shift_jitter_mm), u(cfg.shift_jitter_mm * 0.5)];
        a.placement = RigidTransform::about_center([0.0, 0.0, angle], [0.0; 3], shift);
        let j = cfg.position_jitter_mm;
        a.vs_center = [a.vs_center[0] + u(j), a.vs_center[1] + u(j), a.vs_center[2] + u(j * 0.5)];
        a.cochlea_center = [a.cochlea_center[0] + u(j) * 0.5, a.cochlea_center[1] + u(j), a.cochlea_center[2] + u(j * 0.5)];
        let mut r = |range: [f64; 2]| if range[1] > range[0] { rng.random_range(range[0]..=range[1]) } else { range[0] };
        let vr = r(cfg.vs_radius_range);
        a.vs_radii = [vr, r(cfg.vs_radius_range) * 0.85, r(cfg.vs_radius_range) * 0.75];
        let cr = r(cfg.cochlea_radius_range);
        a.cochlea_radii = [cr, r(cfg.cochlea_radius_range), cr * 0.8];
        // keep the cochlea clear of the VS
        let gap = a.vs_center[0] + a.vs_radii[0] + 1.5 + a.cochlea_radii[0];
        a.cochlea_center[0] = a.cochlea_center[0].max(gap);
        let mut l = |x: f64| x + rng.random_range(-0.03..=0.03);
        a.levels = Levels {
            background: a.levels.background,
            tissue: l(a.levels.tissue),
            fluid: l(a.levels.fluid),
            stem: l(a.levels.stem),
            cochlea: l(a.levels.cochlea),
            vs: l(a.levels.vs),
        };
        a.bias_phase = [0; 2].map(|_| [0; 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU)));
        a
    }

    /// Modality-A intensity and label at canonical point `c`.
    fn tissue(&self, c: [f64; 3], half: [f64; 3]) -> (f64, u8) {
        let l = &self.levels;
        let head = [half[0] * 0.92, half[1] * 0.9, half[2] * 0.85];
        if !inside_ellipsoid(c, [0.0; 3], head) {
            return (l.background, BACKGROUND);
        }
        if inside_ellipsoid(c, self.vs_center, self.vs_radii) {
            return (l.vs, VS);
        }
        if inside_ellipsoid(c, self.cochlea_center, self.cochlea_radii) {
            return (l.cochlea, COCHLEA);
        }
        // fluid channel along x towards the cochlea
        let in_channel = c[0] > self.vs_center[0] && c[0] < self.cochlea_center[0] - self.cochlea_radii[0] - 0.5 && {
            let dy = c[1] + 2.0;
            let dz = c[2];
            dy * dy + dz * dz <= 2.0 * 2.0
        };
        if in_channel {
            return (l.fluid, BACKGROUND);
        }
        if inside_ellipsoid(c, [-half[0] * 0.55, -half[1] * 0.2, 0.0], [half[0] * 0.22, half[1] * 0.45, half[2] * 0.6]) {
            return (l.stem, BACKGROUND);
        }
        let texture = 0.03 * (c[0] * 0.35).sin() * (c[1] * 0.45).cos();
        (l.tissue + texture, BACKGROUND)
    }

    fn render(&self, cfg: &PhantomConfig) -> Result<(Vec<f64>, LabelMap)> {
        let geom = cfg.geometry();
        let center = geom.center();
        let half = cfg.extent().map(|e| e / 2.0);
        let inv = self.placement.inverse();
        let to_canonical = |v: [f64; 3]| {
            let w = geom.voxel_to_world(v);
            inv.apply([w[0] - center[0], w[1] - center[1], w[2] - center[2]])
        };
        let n = geom.len();
        let mut intensity = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        const SUB: [f64; 2] = [-0.25, 0.25];
        for i in 0..n {
            let [x, y, z] = geom.coords(i);
            let v = [x as f64, y as f64, z as f64];
            labels.push(self.tissue(to_canonical(v), half).1);
            let mut acc = 0.0;
            for dz in SUB {
                for dy in SUB {
                    for dx in SUB {
                        acc += self.tissue(to_canonical([v[0] + dx, v[1] + dy, v[2] + dz]), half).0;
                    }
                }
            }
            intensity.push(acc / 8.0);
        }
        Ok((intensity, LabelMap::new(geom, labels)?))
    }

    /// Smooth multiplicative field of modality `m` (0 = A, 1 = B).
    fn bias(&self, cfg: &PhantomConfig, m: usize) -> Vec<f64> {
        let geom = cfg.geometry();
        let half = cfg.extent().map(|e| e / 2.0);
        let p = self.bias_phase[m];
        (0..geom.len())
            .map(|i| {
                let [x, y, z] = geom.coords(i);
                let w = geom.voxel_to_world([x as f64, y as f64, z as f64]);
                let f = (w[0] / half[0] * 1.5 + p[0]).sin() + (w[1] / half[1] * 1.2 + p[1]).sin() + (w[2] / half[2] + p[2]).sin();
                (cfg.bias_amplitude * f / 3.0).exp()
            })
            .collect()
    }
}

fn finish(cfg: &PhantomConfig, clean: &[f64], bias: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let data = clean
        .iter()
        .zip(bias)
        .map(|(&x, &b)| {
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            (x * b + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Volume::new(cfg.geometry(), data)
}

/// One subject: modality A, modality B and the exact labels shared by both.
pub fn generate_subject(cfg: &PhantomConfig, index: usize) -> Result<(Volume, Volume, LabelMap)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(cfg.seed, index));
    let anatomy = Anatomy::random(cfg, &mut rng);
    let (clean_a, labels) = anatomy.render(cfg)?;
    let clean_b: Vec<f64> = clean_a.iter().map(|&x| cfg.a_to_b(x)).collect();
    let a = finish(cfg, &clean_a, &anatomy.bias(cfg, 0), cfg.noise_a, &mut rng)?;
    let b = finish(cfg, &clean_b, &anatomy.bias(cfg, 1), cfg.noise_b, &mut rng)?;
    Ok((a, b, labels))
}

/// Noise- and jitter-free modality-A subject with mean sizes, for use as the
/// registration template.
pub fn generate_template(cfg: &PhantomConfig) -> Result<(Volume, LabelMap)> {
    cfg.validate()?;
    let anatomy = Anatomy::canonical(cfg);
    let (clean, labels) = anatomy.render(cfg)?;
    let data = clean.iter().map(|&x| x.clamp(0.0, 1.0) as f32).collect();
    Ok((Volume::new(cfg.geometry(), data)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub a: PathBuf,
    pub b: PathBuf,
    pub labels: PathBuf,
}

/// Cohort description; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PhantomConfig,
    pub template: PathBuf,
    pub subjects: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.config.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Writes `n` subjects, the template and `manifest.json` into `dir`.
pub fn generate_cohort(cfg: &PhantomConfig, n: usize, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("cohort size must be at least 1".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (template, _) = generate_template(cfg)?;
    let template_path = PathBuf::from("template.nii.gz");
    save_volume(&template, dir.join(&template_path))?;
    let mut subjects = Vec::with_capacity(n);
    for index in 0..n {
        let id = format!("sub-{index:03}");
        let (a, b, l) = generate_subject(cfg, index)?;
        let entry = ManifestEntry {
            a: PathBuf::from(format!("{id}_a.nii.gz")),
            b: PathBuf::from(format!("{id}_b.nii.gz")),
            labels: PathBuf::from(format!("{id}_labels.nii.gz")),
            seed: subject_seed(cfg.seed, index),
            index,
            id,
        };
        save_volume(&a, dir.join(&entry.a))?;
        save_volume(&b, dir.join(&entry.b))?;
        save_labels(&l, dir.join(&entry.labels))?;
        log::info!("phantom {} written", entry.id);
        subjects.push(entry);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        template: template_path,
        subjects,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Regenerates every file listed in a manifest into `dir`.
pub fn regenerate(manifest: &Manifest, dir: &Path) -> Result<Manifest> {
    generate_cohort(&manifest.config, manifest.subjects.len(), dir)
}
