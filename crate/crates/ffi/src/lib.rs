//! C ABI over the `xmoda` library.
//!
//! Every object crosses the boundary as an opaque handle owned by the
//! caller and released with the matching `*_free`. Every fallible call
//! returns an [`XmodaStatus`]; on failure [`xmoda_last_error`] holds a
//! message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use xmoda::config::load_pipeline_config;
use xmoda::ensemble::{fuse_union, largest_component};
use xmoda::metrics::{assd, dice};
use xmoda::phantom::{generate_subject, PhantomConfig};
use xmoda::pipeline::run_pipeline;
use xmoda::segnets::SegNet;
use xmoda::synthesis::{translate_volume, Generator};
use xmoda::volume::{load_labels, load_volume, save_labels, save_volume, Geometry, LabelMap, Volume};
use xmoda::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XmodaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Training = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Intensity image.
pub struct XmodaVolume(Volume);
/// Label map (0 background, 1 VS, 2 cochlea).
pub struct XmodaLabels(LabelMap);
/// Trained segmentation network.
pub struct XmodaSegNet(SegNet);
/// Trained slice translator.
pub struct XmodaGenerator(Generator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> XmodaStatus {
    match e {
        Error::Io { .. } => XmodaStatus::Io,
        Error::Nifti { .. } | Error::Json(_) | Error::Checkpoint(_) => XmodaStatus::Format,
        Error::Shape(_) | Error::GeometryMismatch(_) | Error::OutOfBounds(_) | Error::RoiTooSmall(_) => XmodaStatus::Shape,
        Error::Config(_) => XmodaStatus::Config,
        Error::Diverged { .. } | Error::NoConvergence { .. } => XmodaStatus::Training,
        _ => XmodaStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> XmodaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XmodaStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            XmodaStatus::NullPointer
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            XmodaStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            XmodaStatus::Internal
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn geometry(shape: *const usize, spacing: *const f64) -> Result<Geometry, Fail> {
    if shape.is_null() || spacing.is_null() {
        return Err(Fail::Null("shape or spacing"));
    }
    let (shape, spacing) = unsafe { (*(shape as *const [usize; 3]), *(spacing as *const [f64; 3])) };
    let g = Geometry::new(shape, spacing);
    g.validate()?;
    Ok(g)
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn xmoda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xmoda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// New volume from `shape[0]*shape[1]*shape[2]` values, x fastest.
///
/// # Safety
/// `shape` and `spacing` point to 3 elements; `data` to the full grid.
#[no_mangle]
pub unsafe extern "C" fn xmoda_volume_new(
    shape: *const usize,
    spacing: *const f64,
    data: *const f32,
    out: *mut *mut XmodaVolume,
) -> XmodaStatus {
    guard(|| {
        let g = geometry(shape, spacing)?;
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let values = std::slice::from_raw_parts(data, g.len()).to_vec();
        put(out, XmodaVolume(Volume::new(g, values)?))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_volume_load(path: *const c_char, out: *mut *mut XmodaVolume) -> XmodaStatus {
    guard(|| put(out, XmodaVolume(load_volume(path_arg(path, "path")?)?)))
}

/// # Safety
/// `v` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn xmoda_volume_save(v: *const XmodaVolume, path: *const c_char) -> XmodaStatus {
    guard(|| Ok(save_volume(&borrow(v, "volume")?.0, path_arg(path, "path")?)?))
}

/// Writes the grid extent to `shape[3]` and voxel size to `spacing[3]`.
///
/// # Safety
/// `v` is a live handle; `shape` and `spacing` hold 3 elements each.
#[no_mangle]
pub unsafe extern "C" fn xmoda_volume_geometry(v: *const XmodaVolume, shape: *mut usize, spacing: *mut f64) -> XmodaStatus {
    guard(|| {
        let g = borrow(v, "volume")?.0.geometry();
        if shape.is_null() || spacing.is_null() {
            return Err(Fail::Null("shape or spacing"));
        }
        ptr::copy_nonoverlapping(g.shape.as_ptr(), shape, 3);
        ptr::copy_nonoverlapping(g.spacing.as_ptr(), spacing, 3);
        Ok(())
    })
}

/// Copies the voxel values into `buf`, which must hold exactly `len` values.
///
/// # Safety
/// `v` is a live handle; `buf` holds `len` floats.
#[no_mangle]
pub unsafe extern "C" fn xmoda_volume_copy_data(v: *const XmodaVolume, buf: *mut f32, len: usize) -> XmodaStatus {
    guard(|| {
        let d = borrow(v, "volume")?.0.data();
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        if len != d.len() {
            return Err(Fail::Arg(format!("buffer holds {len} values, volume has {}", d.len())));
        }
        ptr::copy_nonoverlapping(d.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `v` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xmoda_volume_free(v: *mut XmodaVolume) {
    free(v)
}

/// New label map from class ids in {0, 1, 2}, x fastest.
///
/// # Safety
/// `shape` and `spacing` point to 3 elements; `data` to the full grid.
#[no_mangle]
pub unsafe extern "C" fn xmoda_labels_new(
    shape: *const usize,
    spacing: *const f64,
    data: *const u8,
    out: *mut *mut XmodaLabels,
) -> XmodaStatus {
    guard(|| {
        let g = geometry(shape, spacing)?;
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let values = std::slice::from_raw_parts(data, g.len()).to_vec();
        put(out, XmodaLabels(LabelMap::new(g, values)?))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_labels_load(path: *const c_char, out: *mut *mut XmodaLabels) -> XmodaStatus {
    guard(|| put(out, XmodaLabels(load_labels(path_arg(path, "path")?)?)))
}

/// # Safety
/// `l` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn xmoda_labels_save(l: *const XmodaLabels, path: *const c_char) -> XmodaStatus {
    guard(|| Ok(save_labels(&borrow(l, "labels")?.0, path_arg(path, "path")?)?))
}

/// # Safety
/// `l` is a live handle; `shape` holds 3 elements.
#[no_mangle]
pub unsafe extern "C" fn xmoda_labels_shape(l: *const XmodaLabels, shape: *mut usize) -> XmodaStatus {
    guard(|| {
        let s = borrow(l, "labels")?.0.shape();
        if shape.is_null() {
            return Err(Fail::Null("shape"));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), shape, 3);
        Ok(())
    })
}

/// # Safety
/// `l` is a live handle; `buf` holds `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn xmoda_labels_copy_data(l: *const XmodaLabels, buf: *mut u8, len: usize) -> XmodaStatus {
    guard(|| {
        let d = borrow(l, "labels")?.0.data();
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        if len != d.len() {
            return Err(Fail::Arg(format!("buffer holds {len} values, label map has {}", d.len())));
        }
        ptr::copy_nonoverlapping(d.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `l` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xmoda_labels_free(l: *mut XmodaLabels) {
    free(l)
}

/// Dice of class `class_id` between two label maps on the same grid.
///
/// # Safety
/// `a`, `b` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_dice(a: *const XmodaLabels, b: *const XmodaLabels, class_id: u8, out: *mut f64) -> XmodaStatus {
    guard(|| {
        let d = dice(&borrow(a, "a")?.0, &borrow(b, "b")?.0, class_id)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = d;
        Ok(())
    })
}

/// Average symmetric surface distance in mm; fails when either mask is empty.
///
/// # Safety
/// `a`, `b` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_assd(a: *const XmodaLabels, b: *const XmodaLabels, class_id: u8, out: *mut f64) -> XmodaStatus {
    guard(|| {
        let d = assd(&borrow(a, "a")?.0, &borrow(b, "b")?.0, class_id)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = d;
        Ok(())
    })
}

/// Union of `n` label maps; VS wins over cochlea.
///
/// # Safety
/// `maps` points to `n` live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_fuse_union(maps: *const *const XmodaLabels, n: usize, out: *mut *mut XmodaLabels) -> XmodaStatus {
    guard(|| {
        if maps.is_null() {
            return Err(Fail::Null("maps"));
        }
        let segs = std::slice::from_raw_parts(maps, n)
            .iter()
            .map(|&p| borrow(p, "maps[i]").map(|l| l.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        put(out, XmodaLabels(fuse_union(&segs)?))
    })
}

/// Keeps only the largest 26-connected component of `class_id`.
///
/// # Safety
/// `l` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_largest_component(l: *const XmodaLabels, class_id: u8, out: *mut *mut XmodaLabels) -> XmodaStatus {
    guard(|| put(out, XmodaLabels(largest_component(&borrow(l, "labels")?.0, class_id)?)))
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_segnet_load(path: *const c_char, out: *mut *mut XmodaSegNet) -> XmodaStatus {
    guard(|| put(out, XmodaSegNet(SegNet::load(&path_arg(path, "path")?)?)))
}

/// Segments a preprocessed ROI image.
///
/// # Safety
/// `net`, `v` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_segnet_predict(net: *const XmodaSegNet, v: *const XmodaVolume, out: *mut *mut XmodaLabels) -> XmodaStatus {
    guard(|| put(out, XmodaLabels(borrow(net, "net")?.0.predict_labels(&borrow(v, "volume")?.0)?)))
}

/// # Safety
/// `net` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xmoda_segnet_free(net: *mut XmodaSegNet) {
    free(net)
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_generator_load(path: *const c_char, out: *mut *mut XmodaGenerator) -> XmodaStatus {
    guard(|| put(out, XmodaGenerator(Generator::load(&path_arg(path, "path")?)?)))
}

/// Translates a [0, 1] volume slice by slice along `axis`.
///
/// # Safety
/// `g`, `v` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_generator_translate(
    g: *const XmodaGenerator,
    v: *const XmodaVolume,
    axis: usize,
    out: *mut *mut XmodaVolume,
) -> XmodaStatus {
    guard(|| put(out, XmodaVolume(translate_volume(&borrow(v, "volume")?.0, &borrow(g, "generator")?.0, axis)?)))
}

/// # Safety
/// `g` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xmoda_generator_free(g: *mut XmodaGenerator) {
    free(g)
}

/// Phantom subject `index` of the default cohort with `seed`: modality A,
/// modality B and labels.
///
/// # Safety
/// All three outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn xmoda_phantom_subject(
    seed: u64,
    index: usize,
    out_a: *mut *mut XmodaVolume,
    out_b: *mut *mut XmodaVolume,
    out_labels: *mut *mut XmodaLabels,
) -> XmodaStatus {
    guard(|| {
        if out_a.is_null() || out_b.is_null() || out_labels.is_null() {
            return Err(Fail::Null("output pointer"));
        }
        let cfg = PhantomConfig {
            seed,
            ..Default::default()
        };
        let (a, b, l) = generate_subject(&cfg, index)?;
        put(out_a, XmodaVolume(a))?;
        put(out_b, XmodaVolume(b))?;
        put(out_labels, XmodaLabels(l))
    })
}

/// Runs the whole pipeline described by a TOML configuration file.
///
/// # Safety
/// Both arguments are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn xmoda_run_pipeline(config_path: *const c_char, out_dir: *const c_char) -> XmodaStatus {
    guard(|| {
        let (cfg, _) = load_pipeline_config(&path_arg(config_path, "config_path")?, &[])?;
        run_pipeline(&cfg, &path_arg(out_dir, "out_dir")?)?;
        Ok(())
    })
}
