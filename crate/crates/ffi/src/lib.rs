//! C ABI over the segmentation pipeline.
//!
//! Every function returns an [`E2nStatus`]. On failure the calling thread's
//! last error message is set and can be read with [`e2n_last_error`].
//! Arrays are dense, row-major, and indexed `(z, y, x)` for volumes and
//! `(y, x)` for slices. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use e2net::ingest::{window_and_normalize, CtVolume};
use e2net::model::Model;
use e2net::pipeline::{segment_volume, InferenceOptions};
use e2net::supervision::{edge_distance_map, Object};
use e2net::Error;
use ndarray::{ArrayView2, ArrayView3};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum E2nStatus {
    E2nOk = 0,
    /// A required pointer argument was null.
    E2nErrNull = 1,
    /// Bad shapes, values or configuration.
    E2nErrValidation = 2,
    /// File system failure, including a missing checkpoint.
    E2nErrIo = 3,
    /// Unreadable or incompatible checkpoint.
    E2nErrCheckpoint = 4,
    /// Failure during inference, e.g. non-finite network output.
    E2nErrRuntime = 5,
    /// A Rust panic was caught; the handle should be discarded.
    E2nErrPanic = 6,
}

/// Which object an edge distance map describes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum E2nObject {
    E2nLiver = 0,
    E2nTumor = 1,
}

/// Opaque handle: a stage-1 and a stage-2 model plus inference options.
pub struct E2nPipeline {
    stage1: Model,
    stage2: Model,
    opts: InferenceOptions,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> E2nStatus {
    match e {
        Error::Io { .. } | Error::Nifti { .. } => E2nStatus::E2nErrIo,
        Error::Checkpoint(_) => E2nStatus::E2nErrCheckpoint,
        e if e.is_validation() => E2nStatus::E2nErrValidation,
        _ => E2nStatus::E2nErrRuntime,
    }
}

fn fail(status: E2nStatus, msg: &str) -> E2nStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), E2nStatus>) -> E2nStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            E2nStatus::E2nOk
        }
        Ok(Err(s)) => s,
        Err(_) => fail(E2nStatus::E2nErrPanic, "internal panic"),
    }
}

fn lift(e: Error) -> E2nStatus {
    fail(status_of(&e), &e.to_string())
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), E2nStatus> {
    if p.is_null() {
        Err(fail(E2nStatus::E2nErrNull, &format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn count(dims: &[usize]) -> Result<usize, E2nStatus> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(E2nStatus::E2nErrValidation, "dimensions must be positive"))
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, E2nStatus> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(E2nStatus::E2nErrValidation, &format!("{name} is not UTF-8")))
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn e2n_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn e2n_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads two checkpoints into a new pipeline written to `*out`.
///
/// # Safety
/// The paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn e2n_pipeline_load(
    stage1_path: *const c_char,
    stage2_path: *const c_char,
    out: *mut *mut E2nPipeline,
) -> E2nStatus {
    guard(|| {
        non_null(out, "out")?;
        let p1 = path_arg(stage1_path, "stage1_path")?;
        let p2 = path_arg(stage2_path, "stage2_path")?;
        let stage1 = Model::load(p1).map_err(lift)?;
        let stage2 = Model::load(p2).map_err(lift)?;
        let mut opts = InferenceOptions::default();
        if let Some(s) = stage2.meta.get("stage2_size").and_then(|s| s.parse().ok()) {
            opts.stage2_size = s;
        }
        *out = Box::into_raw(Box::new(E2nPipeline { stage1, stage2, opts }));
        Ok(())
    })
}

/// Releases a pipeline. Null is ignored.
///
/// # Safety
/// `p` must come from [`e2n_pipeline_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn e2n_pipeline_free(p: *mut E2nPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Sets the probability threshold (default 0.5) used for both heads.
///
/// # Safety
/// `p` must be a live pipeline.
#[no_mangle]
pub unsafe extern "C" fn e2n_pipeline_set_threshold(p: *mut E2nPipeline, threshold: f32) -> E2nStatus {
    guard(|| {
        non_null(p, "pipeline")?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(fail(E2nStatus::E2nErrValidation, "threshold must lie in (0, 1)"));
        }
        (*p).opts.threshold = threshold;
        Ok(())
    })
}

/// Segments a raw-HU volume of `depth × height × width` voxels. Writes
/// labels 0 (background), 1 (liver) or 2 (tumor) into `labels_out`, which
/// must hold the same number of elements. Spacing is taken as 1 mm.
///
/// # Safety
/// `p` must be a live pipeline; the buffers must hold `depth·height·width`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn e2n_pipeline_segment(
    p: *mut E2nPipeline,
    hu: *const f32,
    depth: usize,
    height: usize,
    width: usize,
    labels_out: *mut u8,
) -> E2nStatus {
    guard(|| {
        non_null(p, "pipeline")?;
        non_null(hu, "hu")?;
        non_null(labels_out, "labels_out")?;
        let n = count(&[depth, height, width])?;
        let view = ArrayView3::from_shape_ptr((depth, height, width), hu);
        let ct = CtVolume::new(view.to_owned(), [1.0; 3], "ffi").map_err(lift)?;
        let pipe = &mut *p;
        let seg = segment_volume(&ct, &mut pipe.stage1, &mut pipe.stage2, &pipe.opts).map_err(lift)?;
        let labels = seg.to_labels();
        let out = std::slice::from_raw_parts_mut(labels_out, n);
        out.iter_mut().zip(labels.labels.iter()).for_each(|(o, &l)| *o = l);
        Ok(())
    })
}

/// Edge distance map of a binary `height × width` mask: 1 on the object
/// boundary falling to 0 at the deepest interior point, 0 outside.
///
/// # Safety
/// `mask` and `out` must hold `height·width` elements.
#[no_mangle]
pub unsafe extern "C" fn e2n_edge_distance_map(
    mask: *const u8,
    height: usize,
    width: usize,
    object: E2nObject,
    out: *mut f64,
) -> E2nStatus {
    guard(|| {
        non_null(mask, "mask")?;
        non_null(out, "out")?;
        let n = count(&[height, width])?;
        let m = ArrayView2::from_shape_ptr((height, width), mask);
        let object = match object {
            E2nObject::E2nLiver => Object::Liver,
            E2nObject::E2nTumor => Object::Tumor,
        };
        let map = edge_distance_map(m, object);
        let out = std::slice::from_raw_parts_mut(out, n);
        out.iter_mut().zip(map.values.iter()).for_each(|(o, &v)| *o = v);
        Ok(())
    })
}

/// Dice coefficient of two binary arrays of `n` elements (nonzero is set);
/// 1 when both are empty.
///
/// # Safety
/// `a` and `b` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn e2n_dice(a: *const u8, b: *const u8, n: usize, out: *mut f64) -> E2nStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        let n = count(&[n])?;
        let a = ArrayView3::from_shape_ptr((1, 1, n), a);
        let b = ArrayView3::from_shape_ptr((1, 1, n), b);
        *out = e2net::metrics::dice(a, b).map_err(lift)?;
        Ok(())
    })
}

/// Clamps `n` HU values to the abdominal window and maps them onto [-1, 1].
///
/// # Safety
/// `hu` and `out` must hold `n` elements; they may alias.
#[no_mangle]
pub unsafe extern "C" fn e2n_window_normalize(hu: *const f32, n: usize, out: *mut f32) -> E2nStatus {
    guard(|| {
        non_null(hu, "hu")?;
        non_null(out, "out")?;
        let n = count(&[n])?;
        let v = ArrayView3::from_shape_ptr((1, 1, n), hu).to_owned();
        let ct = CtVolume::new(v, [1.0; 3], "ffi").map_err(lift)?;
        let w = window_and_normalize(&ct);
        let out = std::slice::from_raw_parts_mut(out, n);
        out.iter_mut().zip(w.voxels.iter()).for_each(|(o, &v)| *o = v);
        Ok(())
    })
}
