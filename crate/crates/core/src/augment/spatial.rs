//! Affine and elastic warps shared by an image and its labels.

use serde::{Deserialize, Serialize};

use crate::volume::{mat_mul, mat_vec, sample_linear, sample_nearest, LabelMap, Mat3, Volume};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Rotation about the x, y and z axes, degrees.
    pub angles_deg: [f64; 3],
    /// Isotropic scale; > 1 enlarges the content.
    pub scale: f64,
}

/// Displacements (voxels) on a `points³` control grid spanning the volume,
/// x-fastest. The dense field is a cubic B-spline of these values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticField {
    pub points: usize,
    pub displacements: Vec<[f64; 3]>,
}

fn rotation(angles_deg: [f64; 3]) -> Mat3 {
    let [a, b, c] = angles_deg.map(f64::to_radians);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t).powi(3) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

impl ElasticField {
    /// Dense displacement at voxel `v` of a grid of `shape`.
    pub fn displacement(&self, shape: [usize; 3], v: [usize; 3]) -> [f64; 3] {
        let n = self.points;
        let mut idx = [[0usize; 4]; 3];
        let mut w = [[0f64; 4]; 3];
        for a in 0..3 {
            let t = if shape[a] > 1 {
                v[a] as f64 * (n - 1) as f64 / (shape[a] - 1) as f64
            } else {
                0.0
            };
            let base = t.floor();
            w[a] = bspline_weights(t - base);
            for (k, slot) in idx[a].iter_mut().enumerate() {
                *slot = (base as isize + k as isize - 1).clamp(0, n as isize - 1) as usize;
            }
        }
        let mut d = [0.0; 3];
        for (kz, &wz) in w[2].iter().enumerate() {
            for (ky, &wy) in w[1].iter().enumerate() {
                for (kx, &wx) in w[0].iter().enumerate() {
                    let p = &self.displacements[idx[0][kx] + n * (idx[1][ky] + n * idx[2][kz])];
                    let ww = wx * wy * wz;
                    for a in 0..3 {
                        d[a] += ww * p[a];
                    }
                }
            }
        }
        d
    }
}

/// For every output voxel, the continuous source voxel it samples from:
/// elastic displacement first, then the inverse of the affine about the
/// volume centre in physical units.
fn source_coords(v: &Volume, affine: Option<&AffineParams>, elastic: Option<&ElasticField>) -> Vec<[f64; 3]> {
    let geom = v.geometry();
    let shape = geom.shape;
    let sp = geom.spacing;
    let c = [0, 1, 2].map(|a| (shape[a] as f64 - 1.0) / 2.0);
    let inv = affine.map(|a| {
        let r = rotation(a.angles_deg);
        // inverse rotation is the transpose, inverse scale the reciprocal
        let rt = [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[j][i] / a.scale));
        rt
    });
    let mut out = Vec::with_capacity(geom.len());
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let mut p = [x as f64, y as f64, z as f64];
                if let Some(e) = elastic {
                    let d = e.displacement(shape, [x, y, z]);
                    for a in 0..3 {
                        p[a] += d[a];
                    }
                }
                if let Some(m) = &inv {
                    let q = [0, 1, 2].map(|a| (p[a] - c[a]) * sp[a]);
                    let r = mat_vec(m, q);
                    p = [0, 1, 2].map(|a| c[a] + r[a] / sp[a]);
                }
                out.push(p);
            }
        }
    }
    out
}

/// Warps `v` (linear) and `l` (nearest) with the same transform. With
/// neither an affine nor an elastic part this is an exact copy.
pub fn warp(v: &Volume, l: &LabelMap, affine: Option<&AffineParams>, elastic: Option<&ElasticField>) -> Result<(Volume, LabelMap)> {
    v.geometry().ensure_same(l.geometry(), "image and labels")?;
    if affine.is_none() && elastic.is_none() {
        return Ok((v.clone(), l.clone()));
    }
    let shape = v.shape();
    let coords = source_coords(v, affine, elastic);
    let img = coords.iter().map(|&p| sample_linear(shape, v.data(), p)).collect();
    let lab = coords.iter().map(|&p| sample_nearest(shape, l.data(), p)).collect();
    Ok((v.with_data(img)?, l.with_data(lab)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn sphere(shape: [usize; 3], r: f64) -> (Volume, LabelMap) {
        let g = Geometry::new(shape, [1.0; 3]);
        let c = shape.map(|n| (n as f64 - 1.0) / 2.0);
        let inside = |x: usize, y: usize, z: usize| {
            let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
            d2 <= r * r
        };
        let v = Volume::from_fn(g.clone(), |x, y, z| if inside(x, y, z) { 1.0 } else { 0.0 }).unwrap();
        let mut lab = Vec::new();
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    lab.push(inside(x, y, z) as u8);
                }
            }
        }
        (v, LabelMap::new(g, lab).unwrap())
    }

    #[test]
    fn identity_affine_is_exact() {
        let (v, l) = sphere([12, 10, 8], 3.0);
        let a = AffineParams {
            angles_deg: [0.0; 3],
            scale: 1.0,
        };
        let (w, m) = warp(&v, &l, Some(&a), None).unwrap();
        assert_eq!(m, l);
        assert!(w.data().iter().zip(v.data()).all(|(p, q)| (p - q).abs() < 1e-6));
    }

    #[test]
    fn scaling_grows_sphere_volume() {
        let (v, l) = sphere([40, 40, 40], 8.0);
        let a = AffineParams {
            angles_deg: [0.0; 3],
            scale: 1.2,
        };
        let (_, m) = warp(&v, &l, Some(&a), None).unwrap();
        let ratio = m.count(1) as f64 / l.count(1) as f64;
        assert!((ratio / 1.2f64.powi(3) - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn zero_elastic_field_is_identity() {
        let (v, l) = sphere([9, 9, 9], 3.0);
        let e = ElasticField {
            points: 7,
            displacements: vec![[0.0; 3]; 343],
        };
        let (w, m) = warp(&v, &l, None, Some(&e)).unwrap();
        assert_eq!(m, l);
        assert_eq!(w, v);
    }

    #[test]
    fn constant_field_shifts() {
        let e = ElasticField {
            points: 4,
            displacements: vec![[1.5, -2.0, 0.5]; 64],
        };
        let d = e.displacement([10, 10, 10], [3, 7, 9]);
        for (a, b) in d.iter().zip([1.5, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
