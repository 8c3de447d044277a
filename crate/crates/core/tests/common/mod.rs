//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use xmoda::volume::{Geometry, LabelMap};

pub fn label_map(shape: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> LabelMap {
    LabelMap::new(Geometry::new(shape, spacing), data).unwrap()
}

/// Mask → label map with `class_id` where the mask is set.
pub fn from_mask(shape: [usize; 3], spacing: [f64; 3], mask: &[bool], class_id: u8) -> LabelMap {
    label_map(shape, spacing, mask.iter().map(|&m| if m { class_id } else { 0 }).collect())
}

pub fn random_labels(rng: &mut impl Rng, shape: [usize; 3], p_fg: f64) -> Vec<u8> {
    let n = shape.iter().product();
    (0..n)
        .map(|_| {
            if rng.random_bool(p_fg) {
                rng.random_range(1..=2u8)
            } else {
                0
            }
        })
        .collect()
}

pub fn dice_oracle(a: &[u8], b: &[u8], c: u8) -> f64 {
    let na = a.iter().filter(|&&x| x == c).count();
    let nb = b.iter().filter(|&&x| x == c).count();
    let both = a.iter().zip(b).filter(|(&x, &y)| x == c && y == c).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn coords(i: usize, s: [usize; 3]) -> [i64; 3] {
    [(i % s[0]) as i64, ((i / s[0]) % s[1]) as i64, (i / (s[0] * s[1])) as i64]
}

/// Voxels of class `c` with a 6-neighbour that is outside the grid or not `c`.
pub fn surface_oracle(l: &[u8], s: [usize; 3], c: u8) -> Vec<[i64; 3]> {
    let get = |p: [i64; 3]| -> bool {
        if (0..3).any(|k| p[k] < 0 || p[k] >= s[k] as i64) {
            return false;
        }
        l[p[0] as usize + s[0] * (p[1] as usize + s[1] * p[2] as usize)] == c
    };
    let mut out = Vec::new();
    for i in 0..l.len() {
        let p = coords(i, s);
        if l[i] != c {
            continue;
        }
        let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
        if steps.iter().any(|d| !get([p[0] + d[0], p[1] + d[1], p[2] + d[2]])) {
            out.push(p);
        }
    }
    out
}

/// All-pairs surface distance: average of the two directed means.
pub fn assd_oracle(a: &[u8], b: &[u8], s: [usize; 3], sp: [f64; 3], c: u8) -> Option<f64> {
    let (sa, sb) = (surface_oracle(a, s, c), surface_oracle(b, s, c));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let dist = |p: &[i64; 3], q: &[i64; 3]| {
        (0..3)
            .map(|k| ((p[k] - q[k]) as f64 * sp[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Some(0.5 * (directed(&sa, &sb) + directed(&sb, &sa)))
}

/// Recursive-free flood fill with 26-connectivity. Returns the component
/// id of every voxel of class `c` (others `usize::MAX`) and the component
/// sizes, ids assigned in order of each component's first voxel.
pub fn components_oracle(l: &[u8], s: [usize; 3], c: u8) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; l.len()];
    let mut sizes = Vec::new();
    for start in 0..l.len() {
        if l[start] != c || comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut stack = vec![start];
        comp[start] = id;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let p = coords(i, s);
            for j in 0..l.len() {
                if l[j] != c || comp[j] != usize::MAX {
                    continue;
                }
                let q = coords(j, s);
                if (0..3).all(|k| (p[k] - q[k]).abs() <= 1) {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Largest 26-connected component of class `c`; ties to the component
/// met first in linear order.
pub fn largest_component_oracle(l: &[u8], s: [usize; 3], c: u8) -> Vec<u8> {
    let (comp, sizes) = components_oracle(l, s, c);
    if sizes.len() <= 1 {
        return l.to_vec();
    }
    let mut keep = 0;
    for (i, &n) in sizes.iter().enumerate() {
        if n > sizes[keep] {
            keep = i;
        }
    }
    l.iter()
        .zip(&comp)
        .map(|(&x, &k)| if x == c && k != keep { 0 } else { x })
        .collect()
}

/// Union with VS over cochlea, one voxel at a time.
pub fn union_oracle(maps: &[Vec<u8>]) -> Vec<u8> {
    (0..maps[0].len())
        .map(|i| {
            let col: Vec<u8> = maps.iter().map(|m| m[i]).collect();
            if col.contains(&1) {
                1
            } else if col.contains(&2) {
                2
            } else {
                0
            }
        })
        .collect()
}
