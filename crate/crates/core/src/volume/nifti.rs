//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! Geometry comes from the sform when its code is non-zero, else from the
//! qform, else from `pixdim` alone. Volumes are reoriented on load so that
//! voxel axes follow the closest RAS-aligned order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

use super::{determinant, orthonormality_error, orthonormalize, Geometry, LabelMap, Mat3, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
/// Looser than the in-memory invariant: srow/quaternion fields are f32.
const FILE_DIRECTION_TOL: f64 = 1e-4;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

struct RawImage {
    geom: Geometry,
    values: Vec<f64>,
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let data: Vec<f32> = raw.values.iter().map(|&v| v as f32).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Volume::new(raw.geom, data)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let mut data = Vec::with_capacity(raw.values.len());
    for &v in &raw.values {
        if !(v.fract() == 0.0 && (0.0..=2.0).contains(&v)) {
            return Err(Error::LabelOutOfRange(v));
        }
        data.push(v as u8);
    }
    LabelMap::new(raw.geom, data)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        payload.write_f32::<LittleEndian>(x).expect("in-memory write");
    }
    write_file(path.as_ref(), v.geometry(), DT_FLOAT32, 32, &payload)
}

pub fn save_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), l.geometry(), DT_UINT8, 8, l.data())
}

fn read_raw(path: &Path) -> Result<RawImage> {
    let bad = |reason: String| Error::Nifti {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(Cursor::new(bytes))
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        bytes = out;
    }
    if bytes.len() < HEADER_SIZE {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(&bytes).map_err(bad)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<BigEndian>(&bytes).map_err(bad)
    } else {
        Err(bad("sizeof_hdr is not 348".into()))
    }
}

fn parse<E: ByteOrder>(b: &[u8]) -> std::result::Result<RawImage, String> {
    let magic = &b[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err("missing NIfTI-1 magic".into());
    }
    let i16_at = |o: usize| E::read_i16(&b[o..o + 2]);
    let f32_at = |o: usize| E::read_f32(&b[o..o + 4]) as f64;
    let dim: Vec<i64> = (0..8).map(|i| i16_at(40 + 2 * i) as i64).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(format!("invalid dim[0] = {ndim}"));
    }
    // Trailing singleton dimensions are tolerated; anything else is not 3D.
    if ndim < 3 || (4..=ndim as usize).any(|i| dim[i] > 1) {
        return Err(format!("expected a 3D image, got dim = {:?}", &dim[..=ndim as usize]));
    }
    let shape = [dim[1], dim[2], dim[3]];
    if shape.iter().any(|&n| n <= 0) {
        return Err(format!("non-positive extent in {shape:?}"));
    }
    let shape = shape.map(|n| n as usize);
    let pixdim: Vec<f64> = (0..8).map(|i| f32_at(76 + 4 * i)).collect();
    let datatype = i16_at(70);
    let vox_offset = f32_at(108) as usize;
    let (slope, inter) = (f32_at(112), f32_at(116));

    let n = shape[0] * shape[1] * shape[2];
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype {other}")),
    };
    let start = vox_offset.max(HEADER_SIZE);
    let end = start + n * width;
    if b.len() < end {
        return Err(format!("truncated data: need {end} bytes, have {}", b.len()));
    }
    let raw = &b[start..end];
    let mut values: Vec<f64> = (0..n)
        .map(|i| {
            let s = &raw[i * width..(i + 1) * width];
            match datatype {
                DT_UINT8 => s[0] as f64,
                DT_INT8 => s[0] as i8 as f64,
                DT_INT16 => E::read_i16(s) as f64,
                DT_UINT16 => E::read_u16(s) as f64,
                DT_INT32 => E::read_i32(s) as f64,
                DT_UINT32 => E::read_u32(s) as f64,
                DT_FLOAT32 => E::read_f32(s) as f64,
                _ => E::read_f64(s),
            }
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }

    let qform_code = i16_at(252);
    let sform_code = i16_at(254);
    let (affine, origin) = if sform_code > 0 {
        let row = |o: usize| [f32_at(o), f32_at(o + 4), f32_at(o + 8), f32_at(o + 12)];
        let (rx, ry, rz) = (row(280), row(296), row(312));
        (
            [[rx[0], rx[1], rx[2]], [ry[0], ry[1], ry[2]], [rz[0], rz[1], rz[2]]],
            [rx[3], ry[3], rz[3]],
        )
    } else if qform_code > 0 {
        let (qb, qc, qd) = (f32_at(256), f32_at(260), f32_at(264));
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = quaternion_to_matrix(qb, qc, qd);
        let s = [pixdim[1], pixdim[2], pixdim[3] * qfac];
        let mut a = [[0.0; 3]; 3];
        for row in 0..3 {
            for col in 0..3 {
                a[row][col] = r[row][col] * s[col];
            }
        }
        (a, [f32_at(268), f32_at(272), f32_at(276)])
    } else {
        (
            [[pixdim[1], 0.0, 0.0], [0.0, pixdim[2], 0.0], [0.0, 0.0, pixdim[3]]],
            [0.0; 3],
        )
    };

    let mut spacing = [0.0; 3];
    let mut direction = [[0.0; 3]; 3];
    for col in 0..3 {
        let norm = (0..3).map(|r| affine[r][col] * affine[r][col]).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(format!("degenerate affine column {col}"));
        }
        spacing[col] = norm;
        for r in 0..3 {
            direction[r][col] = affine[r][col] / norm;
        }
    }
    let err = orthonormality_error(&direction);
    if !(err <= FILE_DIRECTION_TOL) {
        return Err(format!("non-orthonormal direction (max |DᵀD − I| = {err:.3e})"));
    }
    let geom = Geometry {
        shape,
        spacing,
        origin,
        direction: orthonormalize(&direction),
    };
    let (geom, values) = to_canonical(geom, values);
    Ok(RawImage { geom, values })
}

fn quaternion_to_matrix(b: f64, c: f64, d: f64) -> Mat3 {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ]
}

/// Proper rotation to the (b, c, d) quaternion components.
fn matrix_to_quaternion(r: &Mat3) -> [f64; 3] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (a, b, c, d);
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        a = 0.25 * s;
        b = (r[2][1] - r[1][2]) / s;
        c = (r[0][2] - r[2][0]) / s;
        d = (r[1][0] - r[0][1]) / s;
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        a = (r[2][1] - r[1][2]) / s;
        b = 0.25 * s;
        c = (r[0][1] + r[1][0]) / s;
        d = (r[0][2] + r[2][0]) / s;
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        a = (r[0][2] - r[2][0]) / s;
        b = (r[0][1] + r[1][0]) / s;
        c = 0.25 * s;
        d = (r[1][2] + r[2][1]) / s;
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        a = (r[1][0] - r[0][1]) / s;
        b = (r[0][2] + r[2][0]) / s;
        c = (r[1][2] + r[2][1]) / s;
        d = 0.25 * s;
    }
    // NIfTI requires a ≥ 0.
    if a < 0.0 {
        [-b, -c, -d]
    } else {
        [b, c, d]
    }
}

/// Permutes and flips voxel axes so that axis `k` points most closely along
/// world axis `+k`.
fn to_canonical(geom: Geometry, values: Vec<f64>) -> (Geometry, Vec<f64>) {
    let d = geom.direction;
    // world axis assigned to each voxel axis, greedily by magnitude
    let mut assigned = [usize::MAX; 3];
    let mut taken = [false; 3];
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for j in 0..3 {
        for (k, row) in d.iter().enumerate() {
            pairs.push((row[j].abs(), j, k));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (_, j, k) in pairs {
        if assigned[j] == usize::MAX && !taken[k] {
            assigned[j] = k;
            taken[k] = true;
        }
    }
    let flip: [bool; 3] = std::array::from_fn(|j| d[assigned[j]][j] < 0.0);
    if assigned == [0, 1, 2] && !flip.iter().any(|&f| f) {
        return (geom, values);
    }
    let old = geom.shape;
    let mut shape = [0; 3];
    let mut spacing = [0.0; 3];
    let mut direction = [[0.0; 3]; 3];
    for j in 0..3 {
        let k = assigned[j];
        shape[k] = old[j];
        spacing[k] = geom.spacing[j];
        let sign = if flip[j] { -1.0 } else { 1.0 };
        for (r, row) in direction.iter_mut().enumerate() {
            row[k] = sign * d[r][j];
        }
    }
    let corner: [f64; 3] = std::array::from_fn(|j| if flip[j] { (old[j] - 1) as f64 } else { 0.0 });
    let origin = geom.voxel_to_world(corner);
    let mut out = vec![0.0; values.len()];
    for u2 in 0..shape[2] {
        for u1 in 0..shape[1] {
            for u0 in 0..shape[0] {
                let u = [u0, u1, u2];
                let i: [usize; 3] = std::array::from_fn(|j| {
                    let c = u[assigned[j]];
                    if flip[j] {
                        old[j] - 1 - c
                    } else {
                        c
                    }
                });
                out[u0 + shape[0] * (u1 + shape[1] * u2)] = values[geom.index(i[0], i[1], i[2])];
            }
        }
    }
    (
        Geometry {
            shape,
            spacing,
            origin,
            direction,
        },
        out,
    )
}

fn write_file(path: &Path, geom: &Geometry, datatype: i16, bitpix: i16, payload: &[u8]) -> Result<()> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dims = [3i16, geom.shape[0] as i16, geom.shape[1] as i16, geom.shape[2] as i16, 1, 1, 1, 1];
    if geom.shape.iter().any(|&n| n > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!("shape {:?} too large for NIfTI-1", geom.shape)));
    }
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], datatype);
    LittleEndian::write_i16(&mut h[72..], bitpix);

    let mut rot = geom.direction;
    let mut qfac = 1.0;
    if determinant(&rot) < 0.0 {
        qfac = -1.0;
        for row in rot.iter_mut() {
            row[2] = -row[2];
        }
    }
    let pixdim = [qfac, geom.spacing[0], geom.spacing[1], geom.spacing[2], 1.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    let desc = b"xmoda";
    h[148..148 + desc.len()].copy_from_slice(desc);
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    let q = matrix_to_quaternion(&rot);
    for (i, v) in q.iter().chain(geom.origin.iter()).enumerate() {
        LittleEndian::write_f32(&mut h[256 + 4 * i..], *v as f32);
    }
    for r in 0..3 {
        for c in 0..3 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], (geom.direction[r][c] * geom.spacing[c]) as f32);
        }
        LittleEndian::write_f32(&mut h[280 + 16 * r + 12..], geom.origin[r] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let result = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(&h)
            .and_then(|_| enc.write_all(payload))
            .and_then(|_| enc.finish().and_then(|mut w| w.flush()))
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&h).and_then(|_| w.write_all(payload)).and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        let g = Geometry::new([5, 4, 3], [0.5, 0.75, 1.5]).with_origin([-10.25, 4.5, 2.0]);
        Volume::from_fn(g, |x, y, z| x as f32 * 0.125 - y as f32 + z as f32 * 3.5).unwrap()
    }

    #[test]
    fn round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.data(), v.data());
            assert!(back.geometry().approx_eq(v.geometry(), 1e-6));
        }
    }

    #[test]
    fn zeros_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::filled(Geometry::new([16, 16, 16], [1.0; 3]), 0.0).unwrap();
        let p = dir.path().join("z.nii.gz");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.shape(), [16, 16, 16]);
        assert!(back.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nan_voxel_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        let p = dir.path().join("n.nii");
        save_volume(&v, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        LittleEndian::write_f32(&mut bytes[VOX_OFFSET + 8..], f32::NAN);
        std::fs::write(&p, bytes).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert_eq!(err.to_string(), "non-finite data");
    }

    #[test]
    fn labels_round_trip_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([4, 4, 2], [1.0; 3]);
        let l = LabelMap::new(g.clone(), (0..32).map(|i| (i % 3) as u8).collect()).unwrap();
        let p = dir.path().join("l.nii.gz");
        save_labels(&l, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);

        // A float file holding a 3 cannot be loaded as labels.
        let v = Volume::from_fn(g, |x, _, _| if x == 1 { 3.0 } else { 0.0 }).unwrap();
        let p = dir.path().join("bad.nii");
        save_volume(&v, &p).unwrap();
        assert!(matches!(load_labels(&p), Err(Error::LabelOutOfRange(x)) if x == 3.0));
    }

    #[test]
    fn unwritable_destination_reports_path() {
        let v = sample_volume();
        let p = Path::new("/nonexistent-dir/out.nii");
        let err = save_volume(&v, p).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/out.nii"));
    }

    #[test]
    fn non_3d_and_garbage_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.nii");
        std::fs::write(&p, b"not a nifti").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Nifti { .. })));

        let v = sample_volume();
        save_volume(&v, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        LittleEndian::write_i16(&mut bytes[40..], 4);
        LittleEndian::write_i16(&mut bytes[48..], 2);
        std::fs::write(&p, bytes).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("3D"), "{err}");
    }

    #[test]
    fn flipped_axis_is_reoriented() {
        // x axis stored pointing to world −x
        let mut g = Geometry::new([3, 2, 2], [1.0, 2.0, 3.0]).with_origin([5.0, 0.0, 0.0]);
        g.direction = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let v = Volume::from_fn(g.clone(), |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.nii");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        let bg = back.geometry();
        assert!(bg.approx_eq(
            &Geometry::new([3, 2, 2], [1.0, 2.0, 3.0]).with_origin([3.0, 0.0, 0.0]),
            1e-6
        ));
        // The voxel at world x = 3 was stored at index 2.
        assert_eq!(back.get(0, 1, 1), v.get(2, 1, 1));
    }
}
