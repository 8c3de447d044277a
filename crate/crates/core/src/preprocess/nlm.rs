//! Non-local means denoising.

use crate::volume::Volume;
use crate::{Error, Result};

/// Robust estimate of the noise standard deviation from pseudo-residuals
/// (voxel minus the mean of its 6 neighbours), via the median absolute
/// deviation.
pub fn estimate_noise_sigma(v: &Volume) -> f64 {
    let [nx, ny, nz] = v.shape();
    let d = v.data();
    let at = |x: usize, y: usize, z: usize| d[x + nx * (y + ny * z)] as f64;
    let mut res = Vec::new();
    let c = (6.0f64 / 7.0).sqrt();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut sum = 0.0;
                let mut n = 0.0;
                let mut add = |ok: bool, f: &dyn Fn() -> f64| {
                    if ok {
                        sum += f();
                        n += 1.0;
                    }
                };
                add(x > 0, &|| at(x - 1, y, z));
                add(x + 1 < nx, &|| at(x + 1, y, z));
                add(y > 0, &|| at(x, y - 1, z));
                add(y + 1 < ny, &|| at(x, y + 1, z));
                add(z > 0, &|| at(x, y, z - 1));
                add(z + 1 < nz, &|| at(x, y, z + 1));
                if n > 0.0 {
                    res.push(c * (at(x, y, z) - sum / n));
                }
            }
        }
    }
    if res.is_empty() {
        return 0.0;
    }
    let med = median(&mut res);
    let mut dev: Vec<f64> = res.iter().map(|r| (r - med).abs()).collect();
    1.4826 * median(&mut dev)
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Voxel-wise NLM: each voxel becomes a weighted mean over a
/// `(2·search_radius+1)³` window, weights `exp(-max(d² − 2σ², 0) / h²)`
/// where `d²` is the mean squared difference of `(2·patch_radius+1)³`
/// patches, `σ` the estimated noise level and `h = strength · σ`.
/// A noise-free input is returned unchanged.
pub fn denoise_nlm(v: &Volume, strength: f64, patch_radius: usize, search_radius: usize) -> Result<Volume> {
    if patch_radius < 1 || search_radius < 1 {
        return Err(Error::InvalidArgument(format!(
            "NLM radii must be at least 1 (patch {patch_radius}, search {search_radius})"
        )));
    }
    if !(strength > 0.0) || !strength.is_finite() {
        return Err(Error::InvalidArgument(format!("NLM strength must be positive, got {strength}")));
    }
    let sigma = estimate_noise_sigma(v);
    if sigma <= 0.0 {
        return Ok(v.clone());
    }
    let h2 = (strength * sigma).powi(2);
    let two_s2 = 2.0 * sigma * sigma;
    let shape = v.shape();
    let [nx, ny, nz] = shape;
    let (pr, sr) = (patch_radius as isize, search_radius as isize);

    // Edge-replicated copy padded by patch + search radius.
    let pad = pr + sr;
    let pshape = [nx + 2 * pad as usize, ny + 2 * pad as usize, nz + 2 * pad as usize];
    let mut padded = vec![0f32; pshape[0] * pshape[1] * pshape[2]];
    for z in 0..pshape[2] {
        let sz = (z as isize - pad).clamp(0, nz as isize - 1) as usize;
        for y in 0..pshape[1] {
            let sy = (y as isize - pad).clamp(0, ny as isize - 1) as usize;
            for x in 0..pshape[0] {
                let sx = (x as isize - pad).clamp(0, nx as isize - 1) as usize;
                padded[x + pshape[0] * (y + pshape[1] * z)] = v.data()[sx + nx * (sy + ny * sz)];
            }
        }
    }
    let pidx = |x: isize, y: isize, z: isize| (x + pshape[0] as isize * (y + pshape[1] as isize * z)) as usize;
    let patch_len = ((2 * pr + 1) as f64).powi(3);

    let mut out = Vec::with_capacity(v.data().len());
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let (cx, cy, cz) = (x + pad, y + pad, z + pad);
                let mut wsum = 0.0f64;
                let mut acc = 0.0f64;
                for dz in -sr..=sr {
                    for dy in -sr..=sr {
                        for dx in -sr..=sr {
                            let mut d2 = 0.0f32;
                            for pz in -pr..=pr {
                                for py in -pr..=pr {
                                    let a = pidx(cx - pr, cy + py, cz + pz);
                                    let b = pidx(cx + dx - pr, cy + dy + py, cz + dz + pz);
                                    let len = (2 * pr + 1) as usize;
                                    for (p, q) in padded[a..a + len].iter().zip(&padded[b..b + len]) {
                                        d2 += (p - q) * (p - q);
                                    }
                                }
                            }
                            let d2 = d2 as f64 / patch_len;
                            let w = (-(d2 - two_s2).max(0.0) / h2).exp();
                            wsum += w;
                            acc += w * padded[pidx(cx + dx, cy + dy, cz + dz)] as f64;
                        }
                    }
                }
                out.push((acc / wsum) as f32);
            }
        }
    }
    v.with_data(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn constant_is_unchanged() {
        let v = Volume::filled(Geometry::new([8, 8, 4], [1.0; 3]), 0.3).unwrap();
        let d = denoise_nlm(&v, 1.0, 1, 2).unwrap();
        assert!(d.data().iter().all(|&x| (x - 0.3).abs() < 1e-6));
    }

    #[test]
    fn noise_estimate_tracks_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 0.05).unwrap();
        let v = Volume::from_fn(Geometry::new([24, 24, 12], [1.0; 3]), |_, _, _| 0.5 + n.sample(&mut rng) as f32).unwrap();
        let s = estimate_noise_sigma(&v);
        assert!((s - 0.05).abs() < 0.008, "{s}");
    }

    #[test]
    fn rejects_zero_radius() {
        let v = Volume::filled(Geometry::new([4, 4, 4], [1.0; 3]), 0.3).unwrap();
        assert!(denoise_nlm(&v, 1.0, 0, 2).is_err());
    }
}
