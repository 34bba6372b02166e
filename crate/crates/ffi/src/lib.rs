//! C ABI over `facevox`.
//!
//! Grids and models are opaque heap handles created by `fvx_*_encode` /
//! `fvx_*_load` and released with the matching `*_free`. Every fallible
//! function returns an [`FvxStatus`]; on failure a message describing the
//! error is available from [`fvx_last_error_message`] on the same thread.
//! Points cross the boundary as flat `x, y, z` triples of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use facevox::checkpoint::Checkpoint;
use facevox::geometry::{BBox, LandmarkSet, Point3};
use facevox::imaging::ImageTensor;
use facevox::inference::Predictor;
use facevox::metrics::{self, Interocular};
use facevox::volumetric::{decode_peaks, encode_points, EncodeOptions, VoxelGrid};
use facevox::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FvxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    Parse = 5,
    Shape = 6,
    Checkpoint = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A voxel grid (opaque).
pub struct FvxGrid {
    grid: VoxelGrid,
}

/// A trained model ready for inference (opaque).
pub struct FvxModel {
    predictor: Predictor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> FvxStatus {
    match e {
        Error::InvalidInput(_) | Error::UnknownScheme(_) | Error::Config(_) | Error::NonFinite { .. } => {
            FvxStatus::InvalidArgument
        }
        Error::Shape(_) => FvxStatus::Shape,
        Error::Parse { .. } | Error::Image(_) => FvxStatus::Parse,
        Error::Checkpoint(_) => FvxStatus::Checkpoint,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => FvxStatus::NotFound,
        Error::Io(_) => FvxStatus::Io,
    }
}

/// Internal failure carrying its status and message.
struct Fail(FvxStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: FvxStatus, msg: &str) -> Fail {
    Fail(status, msg.to_string())
}

/// Runs `f`, recording any error or panic for `fvx_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FvxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FvxStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FvxStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(fail(FvxStatus::NullPointer, "path is null"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(FvxStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn points_arg(ptr: *const f64, n: usize) -> Result<Vec<Point3>, Fail> {
    if ptr.is_null() {
        return Err(fail(FvxStatus::NullPointer, "point buffer is null"));
    }
    if n == 0 {
        return Err(fail(FvxStatus::InvalidArgument, "need at least one point"));
    }
    let flat = unsafe { std::slice::from_raw_parts(ptr, 3 * n) };
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or_else(|| fail(FvxStatus::NullPointer, "output pointer is null"))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| Fail(FvxStatus::NullPointer, format!("{what} is null")))
}

fn write_points(points: &[Point3], out: *mut f64, capacity: usize) -> Result<(), Fail> {
    if points.len() > capacity {
        return Err(Fail(
            FvxStatus::BufferTooSmall,
            format!("{} points do not fit in a buffer of {capacity}", points.len()),
        ));
    }
    if out.is_null() {
        return Err(fail(FvxStatus::NullPointer, "point output buffer is null"));
    }
    let dst = unsafe { std::slice::from_raw_parts_mut(out, 3 * points.len()) };
    for (d, p) in dst.chunks_exact_mut(3).zip(points) {
        d.copy_from_slice(p);
    }
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fvx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fvx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Encodes `n_points` voxel-space points into a `dims[0] x dims[1] x
/// dims[2]` (w, h, d) grid with Gaussian width `sigma`.
///
/// # Safety
/// `points` must hold `3 * n_points` doubles, `dims` three sizes, and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn fvx_grid_encode(
    points: *const f64,
    n_points: usize,
    dims: *const usize,
    sigma: f64,
    truncate: bool,
    out: *mut *mut FvxGrid,
) -> FvxStatus {
    guard(|| {
        let out = unsafe { out_arg(out)? };
        let pts = unsafe { points_arg(points, n_points)? };
        if dims.is_null() {
            return Err(fail(FvxStatus::NullPointer, "dims is null"));
        }
        let d = unsafe { std::slice::from_raw_parts(dims, 3) };
        let grid = encode_points(&pts, [d[0], d[1], d[2]], sigma, EncodeOptions { truncate })?;
        *out = Box::into_raw(Box::new(FvxGrid { grid }));
        Ok(())
    })
}

/// Reads a grid file written by [`fvx_grid_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fvx_grid_load(path: *const c_char, out: *mut *mut FvxGrid) -> FvxStatus {
    guard(|| {
        let out = unsafe { out_arg(out)? };
        let path = unsafe { path_arg(path)? };
        *out = Box::into_raw(Box::new(FvxGrid {
            grid: VoxelGrid::load(&path)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `grid` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fvx_grid_save(grid: *const FvxGrid, path: *const c_char) -> FvxStatus {
    guard(|| {
        let g = unsafe { ref_arg(grid, "grid")? };
        let path = unsafe { path_arg(path)? };
        g.grid.save(&path)?;
        Ok(())
    })
}

/// Writes `(w, h, d)` into `out_dims`.
///
/// # Safety
/// `grid` must be a live handle; `out_dims` must hold three sizes.
#[no_mangle]
pub unsafe extern "C" fn fvx_grid_dims(grid: *const FvxGrid, out_dims: *mut usize) -> FvxStatus {
    guard(|| {
        let g = unsafe { ref_arg(grid, "grid")? };
        if out_dims.is_null() {
            return Err(fail(FvxStatus::NullPointer, "out_dims is null"));
        }
        let dst = unsafe { std::slice::from_raw_parts_mut(out_dims, 3) };
        dst.copy_from_slice(&g.grid.dims());
        Ok(())
    })
}

/// Copies the voxel values, x fastest then y then z, into `out`.
///
/// # Safety
/// `grid` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fvx_grid_values(grid: *const FvxGrid, out: *mut f64, len: usize) -> FvxStatus {
    guard(|| {
        let g = unsafe { ref_arg(grid, "grid")? };
        let v = g.grid.values();
        if len < v.len() {
            return Err(Fail(FvxStatus::BufferTooSmall, format!("need {} values, buffer holds {len}", v.len())));
        }
        if out.is_null() {
            return Err(fail(FvxStatus::NullPointer, "value buffer is null"));
        }
        unsafe { std::slice::from_raw_parts_mut(out, v.len()) }.copy_from_slice(v);
        Ok(())
    })
}

/// Releases a grid. NULL is ignored.
///
/// # Safety
/// `grid` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fvx_grid_free(grid: *mut FvxGrid) {
    if !grid.is_null() {
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// Finds local maxima above `min_value`, merging peaks closer than
/// `min_separation` voxels. `*out_count` always receives the number found;
/// if it exceeds `capacity` (in points) nothing is written and
/// `FVX_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `grid` must be a live handle, `out_points` must hold `3 * capacity`
/// doubles (may be NULL when `capacity` is 0), `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn fvx_decode_peaks(
    grid: *const FvxGrid,
    min_value: f64,
    min_separation: f64,
    out_points: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> FvxStatus {
    guard(|| {
        let g = unsafe { ref_arg(grid, "grid")? };
        let count = unsafe { out_arg(out_count)? };
        let peaks = decode_peaks(&g.grid, min_value, min_separation);
        *count = peaks.len();
        write_points(&peaks, out_points, capacity)
    })
}

/// Mean 3D point error over the ground-truth outer-eye distance, percent.
///
/// # Safety
/// `pred` and `gt` must hold `3 * n_points` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fvx_gte(
    pred: *const f64,
    gt: *const f64,
    n_points: usize,
    left_eye_outer: usize,
    right_eye_outer: usize,
    interocular_2d: bool,
    out: *mut f64,
) -> FvxStatus {
    guard(|| {
        let out = unsafe { out_arg(out)? };
        let p = LandmarkSet::new(unsafe { points_arg(pred, n_points)? }, "custom")?;
        let g = LandmarkSet::new(unsafe { points_arg(gt, n_points)? }, "custom")?;
        let norm = if interocular_2d { Interocular::TwoD } else { Interocular::ThreeD };
        *out = metrics::gte(&p, &g, left_eye_outer, right_eye_outer, norm)?;
        Ok(())
    })
}

/// Mean 2D point error over `sqrt(w * h)` of `bbox = {x0, y0, w, h}`,
/// percent. Depth values are ignored.
///
/// # Safety
/// `pred` and `gt` must hold `3 * n_points` doubles, `bbox` four doubles;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fvx_nme(
    pred: *const f64,
    gt: *const f64,
    n_points: usize,
    bbox: *const f64,
    out: *mut f64,
) -> FvxStatus {
    guard(|| {
        let out = unsafe { out_arg(out)? };
        let p = LandmarkSet::new(unsafe { points_arg(pred, n_points)? }, "custom")?;
        let g = LandmarkSet::new(unsafe { points_arg(gt, n_points)? }, "custom")?;
        if bbox.is_null() {
            return Err(fail(FvxStatus::NullPointer, "bbox is null"));
        }
        let b = unsafe { std::slice::from_raw_parts(bbox, 4) };
        let b = BBox::new(b[0], b[1], b[2], b[3])?;
        *out = metrics::nme(&p, &g, &b)?;
        Ok(())
    })
}

/// Loads a training checkpoint for inference.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fvx_model_load(path: *const c_char, out: *mut *mut FvxModel) -> FvxStatus {
    guard(|| {
        let out = unsafe { out_arg(out)? };
        let path = unsafe { path_arg(path)? };
        let predictor = Predictor::new(Checkpoint::load(&path)?)?;
        *out = Box::into_raw(Box::new(FvxModel { predictor }));
        Ok(())
    })
}

/// Number of landmarks the model predicts.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fvx_model_n_landmarks(model: *const FvxModel, out: *mut usize) -> FvxStatus {
    guard(|| {
        let m = unsafe { ref_arg(model, "model")? };
        *unsafe { out_arg(out)? } = m.predictor.n_landmarks();
        Ok(())
    })
}

/// Predicts landmarks for a planar RGB image (`3 * height * width` doubles
/// in [0, 1], channel-major, rows top to bottom). `bbox` is `{x0, y0, w, h}`
/// or NULL for the whole image. Output points are in image pixels with
/// zero-mean depth.
///
/// # Safety
/// `model` must be a live handle; `rgb` must hold `3 * width * height`
/// doubles; `bbox` four doubles or NULL; `out_points` `3 * capacity`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn fvx_model_predict(
    model: *const FvxModel,
    rgb: *const f64,
    width: usize,
    height: usize,
    bbox: *const f64,
    out_points: *mut f64,
    capacity: usize,
) -> FvxStatus {
    guard(|| {
        let m = unsafe { ref_arg(model, "model")? };
        if rgb.is_null() {
            return Err(fail(FvxStatus::NullPointer, "image buffer is null"));
        }
        let n = 3usize
            .checked_mul(width)
            .and_then(|v| v.checked_mul(height))
            .ok_or_else(|| fail(FvxStatus::InvalidArgument, "image size overflows"))?;
        let data = unsafe { std::slice::from_raw_parts(rgb, n) }.to_vec();
        let image = ImageTensor::from_planar(width, height, data)?;
        let bbox = if bbox.is_null() {
            None
        } else {
            let b = unsafe { std::slice::from_raw_parts(bbox, 4) };
            Some(BBox::new(b[0], b[1], b[2], b[3])?)
        };
        let p = m.predictor.predict(&image, bbox)?;
        write_points(p.landmarks.points(), out_points, capacity)
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fvx_model_free(model: *mut FvxModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
