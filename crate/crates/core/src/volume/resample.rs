use crate::error::{Error, Result};

use super::{mat_mul, mat_vec, Geometry, Interpolation, LabelMap, Mat3, Volume, VoxelBox, IDENTITY};

/// Common surface of [`Volume`] and [`LabelMap`] for geometry operations.
pub trait GridImage: Sized {
    type Elem: Copy + Default + PartialEq + std::fmt::Debug;
    /// Whether linear interpolation is meaningful for this grid.
    const INTERPOLABLE: bool;

    fn geometry(&self) -> &Geometry;
    fn values(&self) -> &[Self::Elem];
    fn from_parts(geom: Geometry, data: Vec<Self::Elem>) -> Result<Self>;
    fn lerp_sample(shape: [usize; 3], data: &[Self::Elem], v: [f64; 3]) -> Self::Elem;
}

impl GridImage for Volume {
    type Elem = f32;
    const INTERPOLABLE: bool = true;

    fn geometry(&self) -> &Geometry {
        Volume::geometry(self)
    }
    fn values(&self) -> &[f32] {
        self.data()
    }
    fn from_parts(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        Volume::new(geom, data)
    }
    fn lerp_sample(shape: [usize; 3], data: &[f32], v: [f64; 3]) -> f32 {
        sample_linear(shape, data, v)
    }
}

impl GridImage for LabelMap {
    type Elem = u8;
    const INTERPOLABLE: bool = false;

    fn geometry(&self) -> &Geometry {
        LabelMap::geometry(self)
    }
    fn values(&self) -> &[u8] {
        self.data()
    }
    fn from_parts(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        LabelMap::new(geom, data)
    }
    fn lerp_sample(shape: [usize; 3], data: &[u8], v: [f64; 3]) -> u8 {
        sample_nearest(shape, data, v)
    }
}

/// World-space affine map `p ↦ linear · p + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine3 {
    pub linear: Mat3,
    pub offset: [f64; 3],
}

impl Affine3 {
    pub const IDENTITY: Affine3 = Affine3 {
        linear: IDENTITY,
        offset: [0.0; 3],
    };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let l = mat_vec(&self.linear, p);
        [l[0] + self.offset[0], l[1] + self.offset[1], l[2] + self.offset[2]]
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Affine3) -> Affine3 {
        Affine3 {
            linear: mat_mul(&self.linear, &other.linear),
            offset: self.apply(other.offset),
        }
    }
}

/// Trilinear sample at continuous voxel coordinates; coordinates outside the
/// grid are clamped to the nearest edge.
pub fn sample_linear(shape: [usize; 3], data: &[f32], v: [f64; 3]) -> f32 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        let hi = (shape[a] - 1) as f64;
        let c = v[a].clamp(0.0, hi);
        let fl = c.floor();
        i0[a] = fl as usize;
        i1[a] = (i0[a] + 1).min(shape[a] - 1);
        f[a] = c - fl;
    }
    let nx = shape[0];
    let nxy = shape[0] * shape[1];
    let at = |x: usize, y: usize, z: usize| data[x + nx * y + nxy * z] as f64;
    let c00 = at(i0[0], i0[1], i0[2]) * (1.0 - f[0]) + at(i1[0], i0[1], i0[2]) * f[0];
    let c10 = at(i0[0], i1[1], i0[2]) * (1.0 - f[0]) + at(i1[0], i1[1], i0[2]) * f[0];
    let c01 = at(i0[0], i0[1], i1[2]) * (1.0 - f[0]) + at(i1[0], i0[1], i1[2]) * f[0];
    let c11 = at(i0[0], i1[1], i1[2]) * (1.0 - f[0]) + at(i1[0], i1[1], i1[2]) * f[0];
    let c0 = c00 * (1.0 - f[1]) + c10 * f[1];
    let c1 = c01 * (1.0 - f[1]) + c11 * f[1];
    (c0 * (1.0 - f[2]) + c1 * f[2]) as f32
}

/// Nearest-neighbour sample with edge clamping.
pub fn sample_nearest<T: Copy>(shape: [usize; 3], data: &[T], v: [f64; 3]) -> T {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = (v[a] + 0.5).floor();
        idx[a] = r.clamp(0.0, (shape[a] - 1) as f64) as usize;
    }
    data[idx[0] + shape[0] * (idx[1] + shape[1] * idx[2])]
}

/// Resamples `img` onto `target`: each target voxel at world point `p` takes
/// the value of `img` at world point `world_map(p)`.
pub fn resample_onto<G: GridImage>(
    img: &G,
    target: &Geometry,
    world_map: &Affine3,
    interp: Interpolation,
) -> Result<G> {
    if interp == Interpolation::Linear && !G::INTERPOLABLE {
        return Err(Error::InvalidArgument(
            "linear interpolation requested on a label map; use nearest".into(),
        ));
    }
    target.validate()?;
    let src = img.geometry();
    // Compose target voxel → world → mapped world → source voxel into one affine.
    let origin = src.world_to_voxel(world_map.apply(target.voxel_to_world([0.0; 3])));
    let mut axes = [[0.0; 3]; 3];
    for (a, axis) in axes.iter_mut().enumerate() {
        let mut unit = [0.0; 3];
        unit[a] = 1.0;
        let p = src.world_to_voxel(world_map.apply(target.voxel_to_world(unit)));
        *axis = [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
    }
    let [nx, ny, nz] = target.shape;
    let shape = src.shape;
    let data = img.values();
    let mut out = Vec::with_capacity(target.len());
    for z in 0..nz {
        for y in 0..ny {
            let (zf, yf) = (z as f64, y as f64);
            let row = [
                origin[0] + axes[1][0] * yf + axes[2][0] * zf,
                origin[1] + axes[1][1] * yf + axes[2][1] * zf,
                origin[2] + axes[1][2] * yf + axes[2][2] * zf,
            ];
            for x in 0..nx {
                let xf = x as f64;
                let v = [
                    row[0] + axes[0][0] * xf,
                    row[1] + axes[0][1] * xf,
                    row[2] + axes[0][2] * xf,
                ];
                out.push(match interp {
                    Interpolation::Linear => G::lerp_sample(shape, data, v),
                    Interpolation::Nearest => sample_nearest(shape, data, v),
                });
            }
        }
    }
    G::from_parts(target.clone(), out)
}

/// Resamples onto a new grid with the same direction whose field of view is
/// centred on the original one.
pub fn resample<G: GridImage>(
    img: &G,
    target_shape: [usize; 3],
    target_spacing: [f64; 3],
    interp: Interpolation,
) -> Result<G> {
    let src = img.geometry();
    let mut target = Geometry {
        shape: target_shape,
        spacing: target_spacing,
        origin: [0.0; 3],
        direction: src.direction,
    };
    target.validate()?;
    let center = src.center();
    let half = mat_vec(
        &src.direction,
        [
            target_spacing[0] * (target_shape[0] as f64 - 1.0) / 2.0,
            target_spacing[1] * (target_shape[1] as f64 - 1.0) / 2.0,
            target_spacing[2] * (target_shape[2] as f64 - 1.0) / 2.0,
        ],
    );
    target.origin = [center[0] - half[0], center[1] - half[1], center[2] - half[2]];
    if target == *src {
        return G::from_parts(target, img.values().to_vec());
    }
    resample_onto(img, &target, &Affine3::IDENTITY, interp)
}

/// Extracts the sub-grid covered by `bx`; the result carries the matching
/// physical geometry.
pub fn crop<G: GridImage>(img: &G, bx: &VoxelBox) -> Result<G> {
    let g = img.geometry();
    if !bx.fits_in(g.shape) {
        return Err(Error::OutOfBounds(format!(
            "box {:?}+{:?} exceeds grid {:?}",
            bx.min, bx.size, g.shape
        )));
    }
    let data = img.values();
    let mut out = Vec::with_capacity(bx.size.iter().product());
    for z in bx.min[2]..bx.min[2] + bx.size[2] {
        for y in bx.min[1]..bx.min[1] + bx.size[1] {
            let start = g.index(bx.min[0], y, z);
            out.extend_from_slice(&data[start..start + bx.size[0]]);
        }
    }
    let geom = Geometry {
        shape: bx.size,
        spacing: g.spacing,
        origin: g.voxel_to_world([bx.min[0] as f64, bx.min[1] as f64, bx.min[2] as f64]),
        direction: g.direction,
    };
    G::from_parts(geom, out)
}

/// Writes `cropped` back into a grid with `reference` geometry at `bx`;
/// voxels outside the box are background / zero.
pub fn paste<G: GridImage>(cropped: &G, bx: &VoxelBox, reference: &Geometry) -> Result<G> {
    if cropped.geometry().shape != bx.size {
        return Err(Error::Shape(format!(
            "cropped shape {:?} does not match box size {:?}",
            cropped.geometry().shape,
            bx.size
        )));
    }
    if !bx.fits_in(reference.shape) {
        return Err(Error::OutOfBounds(format!(
            "box {:?}+{:?} exceeds grid {:?}",
            bx.min, bx.size, reference.shape
        )));
    }
    let mut out = vec![G::Elem::default(); reference.len()];
    let src = cropped.values();
    let [sx, sy, _] = bx.size;
    for z in 0..bx.size[2] {
        for y in 0..sy {
            let dst = reference.index(bx.min[0], bx.min[1] + y, bx.min[2] + z);
            let s = sx * (y + sy * z);
            out[dst..dst + sx].copy_from_slice(&src[s..s + sx]);
        }
    }
    G::from_parts(reference.clone(), out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(shape: [usize; 3]) -> Volume {
        Volume::from_fn(Geometry::new(shape, [1.0, 0.8, 2.0]), |x, y, z| {
            (x as f32) * 0.1 + (y as f32) * 0.3 - (z as f32) * 0.2
        })
        .unwrap()
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = ramp([7, 5, 4]);
        let r = resample(&v, [7, 5, 4], [1.0, 0.8, 2.0], Interpolation::Linear).unwrap();
        assert_eq!(r, v);
        // Non-trivial path with the same target still reproduces the data.
        let r = resample_onto(&v, v.geometry(), &Affine3::IDENTITY, Interpolation::Linear).unwrap();
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled(Geometry::new([9, 6, 5], [0.5, 0.5, 1.5]), 0.42).unwrap();
        let r = resample(&v, [13, 4, 11], [0.3, 0.9, 0.7], Interpolation::Linear).unwrap();
        assert!(r.data().iter().all(|&x| (x - 0.42).abs() < 1e-6));
        assert_eq!(r.geometry().shape, [13, 4, 11]);
        assert_eq!(r.geometry().spacing, [0.3, 0.9, 0.7]);
    }

    #[test]
    fn resample_preserves_field_of_view_center() {
        let v = ramp([8, 8, 4]);
        let r = resample(&v, [16, 16, 8], [0.5, 0.4, 1.0], Interpolation::Linear).unwrap();
        let (a, b) = (v.geometry().center(), r.geometry().center());
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn nearest_labels_keep_value_set() {
        let g = Geometry::new([10, 10, 6], [1.0, 1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<u8> = (0..g.len()).map(|_| rng.random_range(0..3u8)).collect();
        let l = LabelMap::new(g, data).unwrap();
        let r = resample(&l, [7, 13, 9], [1.3, 0.7, 1.1], Interpolation::Nearest).unwrap();
        assert!(r.data().iter().all(|&v| v <= 2));
        assert!(matches!(
            resample(&l, [7, 13, 9], [1.3, 0.7, 1.1], Interpolation::Linear),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn crop_full_extent_is_identity_and_out_of_bounds_errors() {
        let v = ramp([6, 5, 4]);
        assert_eq!(crop(&v, &VoxelBox::full([6, 5, 4])).unwrap(), v);
        let bad = VoxelBox::new([3, 0, 0], [4, 2, 2]).unwrap();
        assert!(matches!(crop(&v, &bad), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn crop_then_paste_restores_box_and_zeros_outside() {
        let v = ramp([6, 5, 4]);
        let b = VoxelBox::new([1, 2, 1], [3, 2, 2]).unwrap();
        let c = crop(&v, &b).unwrap();
        // Cropped geometry sits at the box corner in world space.
        assert_eq!(c.geometry().origin, v.geometry().voxel_to_world([1.0, 2.0, 1.0]));
        let p = paste(&c, &b, v.geometry()).unwrap();
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..6 {
                    let inside = (1..4).contains(&x) && (2..4).contains(&y) && (1..3).contains(&z);
                    let expect = if inside { v.get(x, y, z) } else { 0.0 };
                    assert_eq!(p.get(x, y, z), expect);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn crop_paste_identity_on_interior(
            seed in any::<u64>(),
            nx in 1usize..9, ny in 1usize..9, nz in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Geometry::new([nx, ny, nz], [1.0, 1.0, 1.0]);
            let data: Vec<f32> = (0..g.len()).map(|_| rng.random::<f32>()).collect();
            let v = Volume::new(g, data).unwrap();
            let min = [rng.random_range(0..nx), rng.random_range(0..ny), rng.random_range(0..nz)];
            let size = [
                rng.random_range(1..=nx - min[0]),
                rng.random_range(1..=ny - min[1]),
                rng.random_range(1..=nz - min[2]),
            ];
            let b = VoxelBox::new(min, size).unwrap();
            let p = paste(&crop(&v, &b).unwrap(), &b, v.geometry()).unwrap();
            for z in min[2]..min[2] + size[2] {
                for y in min[1]..min[1] + size[1] {
                    for x in min[0]..min[0] + size[0] {
                        prop_assert_eq!(p.get(x, y, z), v.get(x, y, z));
                    }
                }
            }
        }
    }
}
