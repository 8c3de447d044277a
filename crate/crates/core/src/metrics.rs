//! Dice overlap and average symmetric surface distance, per class and
//! aggregated over a cohort.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::volume::{Geometry, LabelMap, COCHLEA, VS};
use crate::{Error, Result};

fn check_pair(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if !a.geometry().approx_eq(b.geometry(), 1e-6) {
        return Err(Error::GeometryMismatch(format!(
            "cannot compare label maps of shape {:?} and {:?} (or different placement)",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` for the masks of `class_id`. Both masks empty
/// gives 1.0; exactly one empty gives 0.0.
pub fn dice(a: &LabelMap, b: &LabelMap, class_id: u8) -> Result<f64> {
    check_pair(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (p, q) = (x == class_id, y == class_id);
        na += p as usize;
        nb += q as usize;
        both += (p && q) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one 6-neighbour outside the mask.
/// Neighbours beyond the grid count as outside.
pub fn surface_voxels(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = shape;
    let at = |x: usize, y: usize, z: usize| mask[x + nx * (y + ny * z)];
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !at(x, y, z) {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                if border
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1)
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Squared distance along one line to the nearest seed (lower envelope of
/// parabolas), with sample spacing `h`.
fn edt_line(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * h;
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest seed.
pub fn squared_distance_map(seeds: &[bool], geom: &Geometry) -> Vec<f64> {
    let shape = geom.shape;
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, shape[0], shape[0] * shape[1]];
    let longest = *shape.iter().max().unwrap_or(&1);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        for start in 0..d.len() {
            if (start / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                f[i] = d[start + i * stride];
            }
            edt_line(&f[..n], geom.spacing[axis], &mut out[..n], &mut v, &mut z);
            for i in 0..n {
                d[start + i * stride] = out[i];
            }
        }
    }
    d
}

/// `(d(A→B) + d(B→A)) / 2` where `d(X→Y)` averages, over the surface voxels
/// of X, the distance (mm) to the nearest surface voxel of Y. Errors when
/// either mask of `class_id` is empty.
pub fn assd(a: &LabelMap, b: &LabelMap, class_id: u8) -> Result<f64> {
    check_pair(a, b)?;
    let geom = a.geometry();
    let (ma, mb) = (a.mask(class_id), b.mask(class_id));
    let sa = surface_voxels(&ma, geom.shape);
    let sb = surface_voxels(&mb, geom.shape);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::Empty(format!("class {class_id} mask is empty; ASSD is undefined")));
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let mut seeds = vec![false; geom.len()];
        for p in to {
            seeds[geom.index(p[0], p[1], p[2])] = true;
        }
        let dist = squared_distance_map(&seeds, geom);
        from.iter().map(|p| dist[geom.index(p[0], p[1], p[2])].sqrt()).sum::<f64>() / from.len() as f64
    };
    Ok(0.5 * (directed(&sa, &sb) + directed(&sb, &sa)))
}

pub fn class_name(class_id: u8) -> &'static str {
    match class_id {
        VS => "VS",
        COCHLEA => "cochlea",
        _ => "background",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectRow {
    pub subject: String,
    pub class: String,
    pub dice: f64,
    /// `None` when ASSD is undefined (empty ground truth or prediction).
    pub assd_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub assd_mean: Option<f64>,
    pub assd_std: Option<f64>,
    /// Subjects whose ASSD was skipped.
    pub assd_skipped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortReport {
    pub rows: Vec<SubjectRow>,
    pub summary: Vec<ClassSummary>,
}

/// Mean and sample (n − 1) standard deviation; 0 spread for one value.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Per-subject Dice and ASSD for VS and cochlea plus per-class mean and
/// sample standard deviation. ASSD is skipped (and the subject listed) when
/// the class is absent from the ground truth or the prediction.
pub fn evaluate_cohort(subjects: &[(String, LabelMap, LabelMap)]) -> Result<CohortReport> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for class_id in [VS, COCHLEA] {
        let mut dices = Vec::new();
        let mut assds = Vec::new();
        let mut skipped = Vec::new();
        for (name, pred, truth) in subjects {
            let d = dice(pred, truth, class_id)?;
            let a = if truth.count(class_id) > 0 && pred.count(class_id) > 0 {
                Some(assd(pred, truth, class_id)?)
            } else {
                skipped.push(name.clone());
                None
            };
            dices.push(d);
            assds.extend(a);
            rows.push(SubjectRow {
                subject: name.clone(),
                class: class_name(class_id).into(),
                dice: d,
                assd_mm: a,
            });
        }
        let (dice_mean, dice_std) = mean_std(&dices).unwrap_or((f64::NAN, f64::NAN));
        let a = mean_std(&assds);
        summary.push(ClassSummary {
            class: class_name(class_id).into(),
            dice_mean,
            dice_std,
            assd_mean: a.map(|x| x.0),
            assd_std: a.map(|x| x.1),
            assd_skipped: skipped,
        });
    }
    rows.sort_by(|a, b| a.subject.cmp(&b.subject).then(a.class.cmp(&b.class).reverse()));
    Ok(CohortReport { rows, summary })
}

impl CohortReport {
    pub fn summary_for(&self, class: &str) -> Option<&ClassSummary> {
        self.summary.iter().find(|s| s.class == class)
    }

    /// `subject,class,dice,assd_mm` rows, then `mean` and `stdev` rows per
    /// class. Skipped ASSD values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("subject,class,dice,assd_mm\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{}", r.subject, r.class, r.dice, fmt(r.assd_mm));
        }
        for c in &self.summary {
            let _ = writeln!(s, "mean,{},{:.6},{}", c.class, c.dice_mean, fmt(c.assd_mean));
            let _ = writeln!(s, "stdev,{},{:.6},{}", c.class, c.dice_std, fmt(c.assd_std));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(shape: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> LabelMap {
        let g = Geometry::new(shape, spacing);
        let mut d = vec![0u8; g.len()];
        for p in on {
            d[g.index(p[0], p[1], p[2])] = 1;
        }
        LabelMap::new(g, d).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = labels([4, 4, 1], [1.0; 3], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let b = labels([4, 4, 1], [1.0; 3], &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 2).unwrap(), 1.0);
        let empty = labels([4, 4, 1], [1.0; 3], &[]);
        assert_eq!(dice(&a, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn assd_cases() {
        let a = labels([8, 1, 1], [1.0; 3], &[[1, 0, 0]]);
        let b = labels([8, 1, 1], [1.0; 3], &[[4, 0, 0]]);
        assert!((assd(&a, &b, 1).unwrap() - 3.0).abs() < 1e-12);
        // directed means 2.5 and 2.0 are averaged, not pooled (7/3)
        let a2 = labels([8, 1, 1], [1.0; 3], &[[0, 0, 0], [1, 0, 0]]);
        let b2 = labels([8, 1, 1], [1.0; 3], &[[3, 0, 0]]);
        assert!((assd(&a2, &b2, 1).unwrap() - 2.25).abs() < 1e-12);
        let a = labels([2, 2, 4], [1.0, 1.0, 2.0], &[[0, 0, 1]]);
        let b = labels([2, 2, 4], [1.0, 1.0, 2.0], &[[0, 0, 2]]);
        assert!((assd(&a, &b, 1).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(assd(&a, &a, 1).unwrap(), 0.0);
        assert!(assd(&a, &labels([2, 2, 4], [1.0, 1.0, 2.0], &[]), 1).is_err());
    }

    #[test]
    fn cohort_statistics() {
        let t = labels([4, 1, 1], [1.0; 3], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let p1 = labels([4, 1, 1], [1.0; 3], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let p2 = labels([4, 1, 1], [1.0; 3], &[[0, 0, 0], [1, 0, 0]]);
        let r = evaluate_cohort(&[("a".into(), p1, t.clone()), ("b".into(), p2, t)]).unwrap();
        let vs = r.summary_for("VS").unwrap();
        // Dice 1.0 and 2·2/6
        let d2 = 4.0 / 6.0;
        assert!((vs.dice_mean - (1.0 + d2) / 2.0).abs() < 1e-12);
        assert!((vs.dice_std - ((1.0 - d2) / 2f64.sqrt())).abs() < 1e-12);
        let co = r.summary_for("cochlea").unwrap();
        assert_eq!(co.assd_skipped, vec!["a".to_string(), "b".to_string()]);
        assert!(r.to_csv().contains("a,cochlea,1.000000,NA"));
        assert_eq!(mean_std(&[0.6, 0.8]).map(|x| (x.0 * 10.0).round()), Some(7.0));
    }
}
