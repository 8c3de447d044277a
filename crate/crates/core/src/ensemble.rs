//! Union fusion of model outputs and VS connected-component cleanup.

use std::collections::VecDeque;

use crate::preprocess::{restore_to_native, ProvenanceRecord};
use crate::volume::{LabelMap, BACKGROUND, COCHLEA, NUM_CLASSES, VS};
use crate::{Error, Result};

/// Per-class voxel-wise OR of all inputs. A voxel claimed as VS by any
/// model is VS; otherwise cochlea if any model says so.
pub fn fuse_union(segs: &[LabelMap]) -> Result<LabelMap> {
    let first = segs.first().ok_or_else(|| Error::Empty("nothing to fuse".into()))?;
    for (i, s) in segs.iter().enumerate().skip(1) {
        if !s.geometry().approx_eq(first.geometry(), 1e-6) {
            return Err(Error::GeometryMismatch(format!(
                "input {i} has shape {:?}, input 0 has {:?} (or different placement)",
                s.shape(),
                first.shape()
            )));
        }
    }
    let mut out = vec![BACKGROUND; first.data().len()];
    for s in segs {
        for (o, &l) in out.iter_mut().zip(s.data()) {
            if l == VS || (l == COCHLEA && *o != VS) {
                *o = l;
            }
        }
    }
    first.with_data(out)
}

/// Keeps only the largest 26-connected component of `class_id`; ties go to
/// the component containing the smallest linear index. Other classes are
/// untouched.
pub fn largest_component(seg: &LabelMap, class_id: u8) -> Result<LabelMap> {
    if class_id as usize >= NUM_CLASSES || class_id == BACKGROUND {
        return Err(Error::InvalidArgument(format!("class {class_id} is not a foreground class")));
    }
    let g = seg.geometry();
    let [nx, ny, nz] = g.shape;
    let data = seg.data();
    let mut comp = vec![u32::MAX; data.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    // Scanning in linear order labels components by their minimum index.
    for start in 0..data.len() {
        if data[start] != class_id || comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = g.coords(i);
            for dz in -1isize..=1 {
                let zz = z as isize + dz;
                if zz < 0 || zz >= nz as isize {
                    continue;
                }
                for dy in -1isize..=1 {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= ny as isize {
                        continue;
                    }
                    for dx in -1isize..=1 {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= nx as isize {
                            continue;
                        }
                        let j = g.index(xx as usize, yy as usize, zz as usize);
                        if data[j] == class_id && comp[j] == u32::MAX {
                            comp[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    if sizes.len() <= 1 {
        return Ok(seg.clone());
    }
    // max_by_key keeps the last maximum, so scan in reverse for the first
    let keep = (0..sizes.len()).rev().max_by_key(|&i| sizes[i]).unwrap_or(0) as u32;
    let out = data
        .iter()
        .zip(&comp)
        .map(|(&l, &c)| if l == class_id && c != keep { BACKGROUND } else { l })
        .collect();
    seg.with_data(out)
}

/// Largest VS component, then back to the native grid.
pub fn postprocess(seg: &LabelMap, p: &ProvenanceRecord) -> Result<LabelMap> {
    restore_to_native(&largest_component(seg, VS)?, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn lab(shape: [usize; 3], d: Vec<u8>) -> LabelMap {
        LabelMap::new(Geometry::new(shape, [1.0; 3]), d).unwrap()
    }

    #[test]
    fn union_truth_table() {
        for a in 0..3u8 {
            for b in 0..3u8 {
                let f = fuse_union(&[lab([1, 1, 1], vec![a]), lab([1, 1, 1], vec![b])]).unwrap();
                let expect = if a == VS || b == VS {
                    VS
                } else if a == COCHLEA || b == COCHLEA {
                    COCHLEA
                } else {
                    BACKGROUND
                };
                assert_eq!(f.data()[0], expect, "{a} {b}");
            }
        }
        assert!(fuse_union(&[]).is_err());
        assert!(fuse_union(&[lab([1, 1, 1], vec![0]), lab([2, 1, 1], vec![0, 0])]).is_err());
    }

    #[test]
    fn largest_component_cases() {
        // sizes 3 and 5 along a line, separated by a gap
        let mut d = vec![0u8; 12];
        d[..3].fill(1);
        d[5..10].fill(1);
        d[11] = 2;
        let out = largest_component(&lab([12, 1, 1], d), VS).unwrap();
        assert_eq!(out.data(), &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 2]);

        // tie: the component with the smaller first index wins
        let mut d = vec![0u8; 9];
        d[..2].fill(1);
        d[6..8].fill(1);
        let out = largest_component(&lab([9, 1, 1], d), VS).unwrap();
        assert_eq!(out.data(), &[1, 1, 0, 0, 0, 0, 0, 0, 0]);

        // diagonal neighbours are connected
        let mut d = vec![0u8; 8];
        d[0] = 1;
        d[7] = 1;
        let l = lab([2, 2, 2], d);
        assert_eq!(largest_component(&l, VS).unwrap(), l);
        assert!(largest_component(&l, 0).is_err());
    }
}
