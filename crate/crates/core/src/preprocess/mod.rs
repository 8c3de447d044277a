//! Preprocessing chain (denoise, rigid alignment to a template, bias
//! correction, ROI crop, intensity normalisation) and its inverse for
//! segmentations.

mod bias;
mod nlm;
mod registration;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bias::{correct_bias_field, correct_bias_field_with, BiasConfig};
pub use nlm::{denoise_nlm, estimate_noise_sigma};
pub use registration::{register_rigid, register_rigid_with, RegistrationConfig};

use crate::volume::{
    crop, determinant, mat_mul, mat_vec, orthonormality_error, paste, resample_onto, transpose, Affine3, Geometry,
    GridImage, Interpolation, LabelMap, Mat3, Volume, VoxelBox, IDENTITY,
};
use crate::{Error, Result};

/// Rotation `R = Rz · Ry · Rx` for angles (radians) about x, y, z.
pub fn euler_rotation(angles: [f64; 3]) -> Mat3 {
    let [a, b, c] = angles;
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

/// World-space rigid map `p ↦ rotation · p + translation` (mm). A
/// registration result maps the moving image's world frame into the fixed
/// one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    /// Rotation by `angles` (radians, see [`euler_rotation`]) about `center`,
    /// followed by a shift.
    pub fn about_center(angles: [f64; 3], center: [f64; 3], shift: [f64; 3]) -> Self {
        let r = euler_rotation(angles);
        let rc = mat_vec(&r, center);
        RigidTransform {
            rotation: r,
            translation: [0, 1, 2].map(|a| center[a] - rc[a] + shift[a]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = orthonormality_error(&self.rotation);
        let det = determinant(&self.rotation);
        if !(err <= 1e-6) || !((det - 1.0).abs() <= 1e-6) || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "not a proper rigid transform (max |RᵀR − I| = {err:.2e}, det = {det:.6})"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p);
        [0, 1, 2].map(|a| r[a] + self.translation[a])
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        RigidTransform {
            rotation: rt,
            translation: t.map(|x| -x),
        }
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    /// Total rotation angle, radians.
    pub fn angle(&self) -> f64 {
        let r = &self.rotation;
        ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn to_affine(&self) -> Affine3 {
        Affine3 {
            linear: self.rotation,
            offset: self.translation,
        }
    }
}

/// Resamples `img` onto `reference` so that the result at world point `q`
/// holds `img` at `t⁻¹(q)`. Label maps require nearest interpolation.
pub fn apply_transform<G: GridImage>(img: &G, t: &RigidTransform, reference: &Geometry, interp: Interpolation) -> Result<G> {
    t.validate()?;
    resample_onto(img, reference, &t.inverse().to_affine(), interp)
}

/// Union of the tight foreground boxes of `labels`, grown symmetrically to
/// exactly `fixed_size` and shifted (never shrunk) to stay inside the grid.
pub fn compute_roi_box(labels: &[LabelMap], fixed_size: [usize; 3]) -> Result<VoxelBox> {
    let first = labels
        .first()
        .ok_or_else(|| Error::Empty("no label maps to derive the ROI from".into()))?;
    let shape = first.shape();
    let mut union: Option<VoxelBox> = None;
    for (i, l) in labels.iter().enumerate() {
        if l.shape() != shape {
            return Err(Error::GeometryMismatch(format!(
                "label map {i} has shape {:?}, expected {shape:?}",
                l.shape()
            )));
        }
        let b = l
            .foreground_bounds()
            .ok_or_else(|| Error::Empty(format!("label map {i} has no foreground")))?;
        union = Some(union.map_or(b, |u| u.union(&b)));
    }
    let union = union.expect("at least one label map");
    let mut min = [0usize; 3];
    for a in 0..3 {
        if union.size[a] > fixed_size[a] {
            return Err(Error::RoiTooSmall(format!(
                "union box spans {:?} voxels but the ROI is {fixed_size:?}",
                union.size
            )));
        }
        if fixed_size[a] > shape[a] {
            return Err(Error::OutOfBounds(format!("ROI {fixed_size:?} exceeds grid {shape:?}")));
        }
        let extra = fixed_size[a] - union.size[a];
        let lo = union.min[a] as isize - (extra / 2) as isize;
        min[a] = lo.clamp(0, (shape[a] - fixed_size[a]) as isize) as usize;
    }
    VoxelBox::new(min, fixed_size)
}

/// Box of `size` centred in a grid of `shape`.
pub fn centered_box(shape: [usize; 3], size: [usize; 3]) -> Result<VoxelBox> {
    if (0..3).any(|a| size[a] > shape[a]) {
        return Err(Error::OutOfBounds(format!("ROI {size:?} exceeds grid {shape:?}")));
    }
    VoxelBox::new([0, 1, 2].map(|a| (shape[a] - size[a]) / 2), size)
}

/// `(v − min) / (max − min)` with the min and max used; a constant input
/// maps to all zeros.
pub fn normalize_intensity(v: &Volume) -> Result<(Volume, f32, f32)> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Ok((v.map(|_| 0.0)?, lo, hi));
    }
    let range = (hi - lo) as f64;
    let out = v.map(|x| (((x - lo) as f64 / range) as f32).clamp(0.0, 1.0))?;
    Ok((out, lo, hi))
}

/// Everything needed to take an ROI-space segmentation back to the native
/// grid. Serialised as a JSON sidecar; lengths in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    /// Native world → template world.
    pub rigid: RigidTransform,
    pub template_geometry: Geometry,
    pub roi_box: VoxelBox,
    pub intensity_min: f32,
    pub intensity_max: f32,
    pub native_geometry: Geometry,
}

impl ProvenanceRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: ProvenanceRecord = serde_json::from_str(&text)?;
        p.rigid.validate()?;
        p.template_geometry.validate()?;
        p.native_geometry.validate()?;
        if !p.roi_box.fits_in(p.template_geometry.shape) {
            return Err(Error::OutOfBounds(format!(
                "ROI box {:?}+{:?} exceeds template grid {:?}",
                p.roi_box.min, p.roi_box.size, p.template_geometry.shape
            )));
        }
        Ok(p)
    }

    /// Geometry of the ROI-space grid.
    pub fn roi_geometry(&self) -> Geometry {
        let g = &self.template_geometry;
        let m = self.roi_box.min;
        Geometry {
            shape: self.roi_box.size,
            spacing: g.spacing,
            origin: g.voxel_to_world([m[0] as f64, m[1] as f64, m[2] as f64]),
            direction: g.direction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlmConfig {
    pub enabled: bool,
    /// Filtering parameter as a multiple of the estimated noise level.
    pub strength: f64,
    pub patch_radius: usize,
    pub search_radius: usize,
}

impl Default for NlmConfig {
    fn default() -> Self {
        NlmConfig {
            enabled: true,
            strength: 1.0,
            patch_radius: 1,
            search_radius: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub nlm: NlmConfig,
    pub registration: RegistrationConfig,
    pub bias_correction: bool,
    pub bias: BiasConfig,
    pub roi_size: [usize; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            nlm: NlmConfig::default(),
            registration: RegistrationConfig::default(),
            bias_correction: true,
            bias: BiasConfig::default(),
            roi_size: [256, 128, 48],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nlm.enabled && (self.nlm.patch_radius < 1 || self.nlm.search_radius < 1 || !(self.nlm.strength > 0.0)) {
            return Err(Error::Config("nlm needs patch_radius ≥ 1, search_radius ≥ 1, strength > 0".into()));
        }
        self.registration.validate()?;
        self.bias.validate()?;
        if self.roi_size.contains(&0) {
            return Err(Error::Config(format!("roi_size must be positive, got {:?}", self.roi_size)));
        }
        Ok(())
    }
}

/// A subject after denoising, alignment and bias correction, on the template
/// grid.
#[derive(Clone, Debug)]
pub struct Aligned {
    pub volume: Volume,
    pub labels: Option<LabelMap>,
    pub rigid: RigidTransform,
    pub native_geometry: Geometry,
}

/// Steps 1–3: denoise, register to `template` and resample onto its grid,
/// correct the bias field. Labels, when given, follow the same rigid map
/// with nearest interpolation.
pub fn align_to_template(v: &Volume, labels: Option<&LabelMap>, template: &Volume, cfg: &PreprocessConfig) -> Result<Aligned> {
    cfg.validate()?;
    if let Some(l) = labels {
        v.geometry().ensure_same(l.geometry(), "image and labels")?;
    }
    let denoised = if cfg.nlm.enabled {
        denoise_nlm(v, cfg.nlm.strength, cfg.nlm.patch_radius, cfg.nlm.search_radius)?
    } else {
        v.clone()
    };
    let rigid = register_rigid_with(&denoised, template, &cfg.registration)?;
    let tg = template.geometry();
    let moved = apply_transform(&denoised, &rigid, tg, Interpolation::Linear)?;
    let volume = if cfg.bias_correction {
        correct_bias_field_with(&moved, &cfg.bias)?.0
    } else {
        moved
    };
    let labels = labels
        .map(|l| apply_transform(l, &rigid, tg, Interpolation::Nearest))
        .transpose()?;
    Ok(Aligned {
        volume,
        labels,
        rigid,
        native_geometry: v.geometry().clone(),
    })
}

/// Output of the full chain for one subject.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub volume: Volume,
    pub labels: Option<LabelMap>,
    pub provenance: ProvenanceRecord,
}

/// Steps 4–5: crop to `roi` and rescale to [0, 1].
pub fn crop_and_normalize(a: &Aligned, roi: &VoxelBox) -> Result<Preprocessed> {
    let template_geometry = a.volume.geometry().clone();
    let cropped = crop(&a.volume, roi)?;
    let (volume, lo, hi) = normalize_intensity(&cropped)?;
    let labels = a.labels.as_ref().map(|l| crop(l, roi)).transpose()?;
    Ok(Preprocessed {
        volume,
        labels,
        provenance: ProvenanceRecord {
            rigid: a.rigid.clone(),
            template_geometry,
            roi_box: *roi,
            intensity_min: lo,
            intensity_max: hi,
            native_geometry: a.native_geometry.clone(),
        },
    })
}

/// Full chain for one volume. Without an explicit `roi`, a box of
/// `cfg.roi_size` centred in the template grid is used.
pub fn preprocess_pipeline(v: &Volume, template: &Volume, roi: Option<VoxelBox>, cfg: &PreprocessConfig) -> Result<(Volume, ProvenanceRecord)> {
    let roi = match roi {
        Some(b) => b,
        None => centered_box(template.shape(), cfg.roi_size)?,
    };
    let p = crop_and_normalize(&align_to_template(v, None, template, cfg)?, &roi)?;
    Ok((p.volume, p.provenance))
}

/// Preprocesses a labelled source cohort and an unlabelled target cohort.
/// The ROI is derived from the source labels in template space and shared
/// by both domains.
pub fn preprocess_cohort(
    source: &[(Volume, LabelMap)],
    target: &[Volume],
    template: &Volume,
    cfg: &PreprocessConfig,
) -> Result<(VoxelBox, Vec<Preprocessed>, Vec<Preprocessed>)> {
    let aligned_src = source
        .iter()
        .map(|(v, l)| align_to_template(v, Some(l), template, cfg))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<LabelMap> = aligned_src.iter().filter_map(|a| a.labels.clone()).collect();
    let roi = compute_roi_box(&labels, cfg.roi_size)?;
    let src = aligned_src.iter().map(|a| crop_and_normalize(a, &roi)).collect::<Result<Vec<_>>>()?;
    let tgt = target
        .iter()
        .map(|v| crop_and_normalize(&align_to_template(v, None, template, cfg)?, &roi))
        .collect::<Result<Vec<_>>>()?;
    Ok((roi, src, tgt))
}

/// Pastes an ROI-space segmentation into the template grid, undoes the
/// rigid alignment and resamples (nearest) onto the native grid.
pub fn restore_to_native(seg: &LabelMap, p: &ProvenanceRecord) -> Result<LabelMap> {
    if seg.shape() != p.roi_box.size {
        return Err(Error::Shape(format!(
            "segmentation shape {:?} does not match the ROI size {:?}",
            seg.shape(),
            p.roi_box.size
        )));
    }
    let full = paste(seg, &p.roi_box, &p.template_geometry)?;
    apply_transform(&full, &p.rigid.inverse(), &p.native_geometry, Interpolation::Nearest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rigid_inverse_and_compose() {
        let t = RigidTransform::about_center([0.1, -0.2, 0.3], [5.0, 6.0, 7.0], [1.0, 2.0, -3.0]);
        t.validate().unwrap();
        let id = t.compose(&t.inverse());
        let p = [3.0, -4.0, 8.0];
        let q = id.apply(p);
        assert!((0..3).all(|a| (p[a] - q[a]).abs() < 1e-12));
        // the centre only moves by the shift
        let c = t.apply([5.0, 6.0, 7.0]);
        assert!((c[0] - 6.0).abs() < 1e-12 && (c[1] - 8.0).abs() < 1e-12 && (c[2] - 4.0).abs() < 1e-12);
        let r = RigidTransform::about_center([0.0, 0.0, 0.2], [0.0; 3], [0.0; 3]);
        assert!((r.angle() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn roi_box_cases() {
        let g = Geometry::new([32, 32, 32], [1.0; 3]);
        let mut d = vec![0u8; g.len()];
        d[g.index(10, 10, 10)] = 1;
        let l = LabelMap::new(g.clone(), d).unwrap();
        let b = compute_roi_box(std::slice::from_ref(&l), [4, 4, 4]).unwrap();
        assert!(b.min.iter().all(|&m| m == 9 || m == 8));
        assert!(b.contains(&VoxelBox::new([10; 3], [1; 3]).unwrap()));

        let mut d = vec![0u8; g.len()];
        d[g.index(2, 2, 2)] = 1;
        d[g.index(11, 2, 2)] = 2;
        let wide = LabelMap::new(g.clone(), d).unwrap();
        assert!(matches!(compute_roi_box(&[wide], [8, 8, 8]), Err(Error::RoiTooSmall(_))));

        // clamped at the low edge, size never shrinks
        let mut d = vec![0u8; g.len()];
        d[g.index(0, 0, 0)] = 1;
        let corner = LabelMap::new(g.clone(), d).unwrap();
        let b = compute_roi_box(&[corner], [6, 6, 6]).unwrap();
        assert_eq!((b.min, b.size), ([0; 3], [6; 3]));
        assert!(compute_roi_box(&[LabelMap::empty(g).unwrap()], [4, 4, 4]).is_err());
    }

    #[test]
    fn normalization_cases() {
        let g = Geometry::new([3, 1, 1], [1.0; 3]);
        let v = Volume::new(g.clone(), vec![10.0, 15.0, 20.0]).unwrap();
        let (n, lo, hi) = normalize_intensity(&v).unwrap();
        assert_eq!((lo, hi), (10.0, 20.0));
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        let c = Volume::filled(g, 7.0).unwrap();
        assert!(normalize_intensity(&c).unwrap().0.data().iter().all(|&x| x == 0.0));
    }
}
