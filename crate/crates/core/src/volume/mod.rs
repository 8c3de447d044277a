//! Volumetric data model shared by every stage of the pipeline.
//!
//! Voxel data is stored x-fastest: the linear index of `(x, y, z)` is
//! `x + X * (y + Y * z)`. World coordinates are millimetres,
//! `world = origin + direction * (spacing ∘ index)`, with the columns of
//! `direction` giving the world direction of each voxel axis.

mod nifti;
mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nifti::{load_labels, load_volume, save_labels, save_volume};
pub use resample::{crop, paste, resample, resample_onto, sample_linear, sample_nearest, Affine3, GridImage};

/// Orthonormality tolerance on the direction matrix.
pub const DIRECTION_TOL: f64 = 1e-6;

pub const BACKGROUND: u8 = 0;
pub const VS: u8 = 1;
pub const COCHLEA: u8 = 2;
pub const NUM_CLASSES: usize = 3;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Physical placement of a voxel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    /// mm per voxel along each voxel axis.
    pub spacing: [f64; 3],
    /// World position (mm) of voxel (0, 0, 0).
    pub origin: [f64; 3],
    /// Row-major 3×3; column `j` is the world direction of voxel axis `j`.
    pub direction: Mat3,
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Geometry {
            shape,
            spacing,
            origin: [0.0; 3],
            direction: IDENTITY,
        }
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGeometry(format!(
                "empty axis in shape {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite origin".into()));
        }
        let err = orthonormality_error(&self.direction);
        if !(err <= DIRECTION_TOL) {
            return Err(Error::InvalidGeometry(format!(
                "direction is not orthonormal (max |DᵀD − I| = {err:.3e})"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.shape[0];
        let r = idx / self.shape[0];
        [x, r % self.shape[1], r / self.shape[1]]
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let scaled = [
            v[0] * self.spacing[0],
            v[1] * self.spacing[1],
            v[2] * self.spacing[2],
        ];
        let d = mat_vec(&self.direction, scaled);
        [
            self.origin[0] + d[0],
            self.origin[1] + d[1],
            self.origin[2] + d[2],
        ]
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        let rel = [
            p[0] - self.origin[0],
            p[1] - self.origin[1],
            p[2] - self.origin[2],
        ];
        let d = mat_vec(&transpose(&self.direction), rel);
        [
            d[0] / self.spacing[0],
            d[1] / self.spacing[1],
            d[2] / self.spacing[2],
        ]
    }

    /// World position of the grid centre.
    pub fn center(&self) -> [f64; 3] {
        self.voxel_to_world([
            (self.shape[0] as f64 - 1.0) / 2.0,
            (self.shape[1] as f64 - 1.0) / 2.0,
            (self.shape[2] as f64 - 1.0) / 2.0,
        ])
    }

    /// Geometry equality up to `tol` on the real-valued fields.
    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        self.shape == other.shape
            && (0..3).all(|i| (self.spacing[i] - other.spacing[i]).abs() <= tol)
            && (0..3).all(|i| (self.origin[i] - other.origin[i]).abs() <= tol)
            && (0..3).all(|r| (0..3).all(|c| (self.direction[r][c] - other.direction[r][c]).abs() <= tol))
    }

    pub(crate) fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.shape, self.spacing, other.shape, other.spacing
            )));
        }
        Ok(())
    }
}

/// A 3D scalar image with physical geometry. Always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                geom.shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Volume { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        let n = geom.len();
        Volume::new(geom, vec![value; n])
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geom.shape;
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(geom, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    /// Same geometry, new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.geom.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Integer class grid over {0 background, 1 VS, 2 cochlea}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    geom: Geometry,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Shape(format!(
                "label length {} does not match shape {:?}",
                data.len(),
                geom.shape
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange(bad as f64));
        }
        Ok(LabelMap { geom, data })
    }

    pub fn empty(geom: Geometry) -> Result<Self> {
        let n = geom.len();
        LabelMap::new(geom, vec![BACKGROUND; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        LabelMap::new(self.geom.clone(), data)
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&v| v == class_id).count()
    }

    pub fn mask(&self, class_id: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class_id).collect()
    }

    pub fn has_foreground(&self) -> bool {
        self.data.iter().any(|&v| v != BACKGROUND)
    }

    /// Tight bounding box of all foreground voxels, if any.
    pub fn foreground_bounds(&self) -> Option<VoxelBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v != BACKGROUND {
                any = true;
                let c = self.geom.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then(|| VoxelBox {
            min: lo,
            size: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1],
        })
    }
}

/// Axis-aligned voxel-index box: `min .. min + size` on every axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub min: [usize; 3],
    pub size: [usize; 3],
}

impl VoxelBox {
    pub fn new(min: [usize; 3], size: [usize; 3]) -> Result<Self> {
        if size.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("box size must be positive, got {size:?}")));
        }
        Ok(VoxelBox { min, size })
    }

    pub fn full(shape: [usize; 3]) -> Self {
        VoxelBox { min: [0; 3], size: shape }
    }

    /// Exclusive upper corner.
    pub fn max(&self) -> [usize; 3] {
        [
            self.min[0] + self.size[0],
            self.min[1] + self.size[1],
            self.min[2] + self.size[2],
        ]
    }

    pub fn fits_in(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|a| self.size[a] > 0 && self.min[a] + self.size[a] <= shape[a])
    }

    pub fn contains(&self, other: &VoxelBox) -> bool {
        (0..3).all(|a| self.min[a] <= other.min[a] && other.max()[a] <= self.max()[a])
    }

    pub fn union(&self, other: &VoxelBox) -> VoxelBox {
        let mut min = [0; 3];
        let mut size = [0; 3];
        for a in 0..3 {
            min[a] = self.min[a].min(other.min[a]);
            size[a] = self.max()[a].max(other.max()[a]) - min[a];
        }
        VoxelBox { min, size }
    }
}

pub(crate) fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub(crate) fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[c][r];
        }
    }
    out
}

pub(crate) fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// max |MᵀM − I|
pub(crate) fn orthonormality_error(m: &Mat3) -> f64 {
    let mtm = mat_mul(&transpose(m), m);
    let mut err: f64 = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            let target = if r == c { 1.0 } else { 0.0 };
            err = err.max((mtm[r][c] - target).abs());
        }
    }
    err
}

/// Nearest orthonormal matrix via Gram-Schmidt on the columns.
pub(crate) fn orthonormalize(m: &Mat3) -> Mat3 {
    let col = |j: usize| [m[0][j], m[1][j], m[2][j]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let norm = |a: [f64; 3]| {
        let n = dot(a, a).sqrt();
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let e0 = norm(col(0));
    let c1 = col(1);
    let p = dot(c1, e0);
    let e1 = norm([c1[0] - p * e0[0], c1[1] - p * e0[1], c1[2] - p * e0[2]]);
    let c2 = col(2);
    let p0 = dot(c2, e0);
    let p1 = dot(c2, e1);
    let e2 = norm([
        c2[0] - p0 * e0[0] - p1 * e1[0],
        c2[1] - p0 * e0[1] - p1 * e1[1],
        c2[2] - p0 * e0[2] - p1 * e1[2],
    ]);
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        out[r] = [e0[r], e1[r], e2[r]];
    }
    out
}
