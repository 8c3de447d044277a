//! Appearance and quality transforms on [0, 1] intensities.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::volume::Volume;
use crate::Result;

/// `v^γ` voxel-wise; negative inputs are treated as 0.
pub fn apply_gamma(v: &Volume, gamma: f64) -> Result<Volume> {
    let g = gamma as f32;
    if g == 1.0 {
        return Ok(v.clone());
    }
    v.map(|x| x.max(0.0).powf(g))
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k.into_iter().map(|w| w as f32).collect()
}

/// Separable Gaussian smoothing along all three voxel axes (sigma in
/// voxels) with edge replication.
pub fn gaussian_blur(shape: [usize; 3], data: &[f32], sigma: f64) -> Vec<f32> {
    gaussian_blur_axes(shape, data, [sigma; 3])
}

/// As [`gaussian_blur`] with a separate sigma (voxels) per axis; a
/// non-positive sigma leaves that axis alone.
pub fn gaussian_blur_axes(shape: [usize; 3], data: &[f32], sigma: [f64; 3]) -> Vec<f32> {
    let mut cur = data.to_vec();
    let mut next = vec![0f32; cur.len()];
    let strides = [1, shape[0], shape[0] * shape[1]];
    for axis in 0..3 {
        let n = shape[axis] as isize;
        if n == 1 || sigma[axis] <= 0.0 {
            continue;
        }
        let k = gaussian_kernel(sigma[axis]);
        let r = (k.len() / 2) as isize;
        let stride = strides[axis];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / stride) % shape[axis]) as isize;
            let base = idx - pos as usize * stride;
            let mut acc = 0f32;
            for (j, &w) in k.iter().enumerate() {
                let p = (pos + j as isize - r).clamp(0, n - 1) as usize;
                acc += w * cur[base + p * stride];
            }
            *out = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

pub fn apply_blur(v: &Volume, sigma: f64) -> Result<Volume> {
    v.with_data(gaussian_blur(v.shape(), v.data(), sigma))
}

/// Additive Gaussian noise, clamped back to [0, 1].
pub fn apply_noise(v: &Volume, sigma: f64, rng: &mut impl Rng) -> Result<Volume> {
    if sigma <= 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let data = v
        .data()
        .iter()
        .map(|&x| (x as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    v.with_data(data)
}

/// `I_b + α (I_b − I_bb)` with `I_b = blur(v)` and `I_bb = blur(I_b)`,
/// clamped to [0, 1].
pub fn apply_sharpen(v: &Volume, alpha: f64, sigma: f64) -> Result<Volume> {
    let shape = v.shape();
    let b = gaussian_blur(shape, v.data(), sigma);
    let bb = gaussian_blur(shape, &b, sigma);
    let a = alpha as f32;
    let data = b.iter().zip(&bb).map(|(&x, &y)| (x + a * (x - y)).clamp(0.0, 1.0)).collect();
    v.with_data(data)
}

const CLAHE_BINS: usize = 256;

/// Clipped, redistributed cumulative histogram of one tile, normalised to
/// end at 1.
fn tile_mapping(values: impl Iterator<Item = f32>, clip_fraction: f64) -> Vec<f32> {
    let mut hist = vec![0f64; CLAHE_BINS];
    let mut count = 0usize;
    for v in values {
        hist[bin_of(v)] += 1.0;
        count += 1;
    }
    if count == 0 {
        return (0..CLAHE_BINS).map(|b| (b as f32 + 0.5) / CLAHE_BINS as f32).collect();
    }
    let limit = (clip_fraction * count as f64).max(1.0);
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / CLAHE_BINS as f64;
    let mut acc = 0.0;
    let total = count as f64;
    hist.iter()
        .map(|h| {
            acc += h + share;
            (acc / total).clamp(0.0, 1.0) as f32
        })
        .collect()
}

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * CLAHE_BINS as f32) as usize).min(CLAHE_BINS - 1)
}

/// Tile index range and centre along one axis.
fn tiles(n: usize, count: usize) -> Vec<(usize, usize, f64)> {
    let count = count.min(n).max(1);
    (0..count)
        .map(|t| {
            let (a, b) = (t * n / count, (t + 1) * n / count);
            (a, b, (a + b) as f64 / 2.0 - 0.5)
        })
        .collect()
}

/// Interpolation partners and weight of position `p` between tile centres.
fn neighbours(p: f64, tiles: &[(usize, usize, f64)]) -> (usize, usize, f32) {
    if p <= tiles[0].2 {
        return (0, 0, 0.0);
    }
    let last = tiles.len() - 1;
    if p >= tiles[last].2 {
        return (last, last, 0.0);
    }
    let i = tiles.iter().rposition(|t| t.2 <= p).unwrap_or(0);
    let w = (p - tiles[i].2) / (tiles[i + 1].2 - tiles[i].2);
    (i, i + 1, w as f32)
}

/// Contrast-limited adaptive histogram equalisation on every axial slice,
/// `grid × grid` tiles, clip limit as a fraction of the tile pixel count.
pub fn apply_clahe_with(v: &Volume, grid: usize, clip_fraction: f64) -> Result<Volume> {
    let [nx, ny, nz] = v.shape();
    let tx = tiles(nx, grid);
    let ty = tiles(ny, grid);
    let mut out = vec![0f32; v.data().len()];
    for z in 0..nz {
        let slice = &v.data()[z * nx * ny..(z + 1) * nx * ny];
        let maps: Vec<Vec<Vec<f32>>> = ty
            .iter()
            .map(|&(y0, y1, _)| {
                tx.iter()
                    .map(|&(x0, x1, _)| tile_mapping((y0..y1).flat_map(|y| (x0..x1).map(move |x| slice[x + nx * y])), clip_fraction))
                    .collect()
            })
            .collect();
        for y in 0..ny {
            let (j0, j1, wy) = neighbours(y as f64, &ty);
            for x in 0..nx {
                let (i0, i1, wx) = neighbours(x as f64, &tx);
                let b = bin_of(slice[x + nx * y]);
                let top = maps[j0][i0][b] * (1.0 - wx) + maps[j0][i1][b] * wx;
                let bot = maps[j1][i0][b] * (1.0 - wx) + maps[j1][i1][b] * wx;
                out[z * nx * ny + x + nx * y] = (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0);
            }
        }
    }
    v.with_data(out)
}

/// [`apply_clahe_with`] using 8×8 tiles and clip limit 0.01.
pub fn apply_clahe(v: &Volume) -> Result<Volume> {
    apply_clahe_with(v, 8, 0.01)
}
