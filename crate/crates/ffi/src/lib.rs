//! C interface to ccan. Handles are opaque and owned by the caller, who
//! releases them with the matching `_free` function. Every fallible call
//! returns a [`CcanStatus`]; on failure the message is available from
//! [`ccan_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ccan::bag::FeatureBag;
use ccan::model::MilModel;
use ccan::tensor::Tensor;
use ccan::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcanStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Data = 6,
    Shape = 7,
    Numeric = 8,
    Config = 9,
    Metric = 10,
    Panic = 11,
}

/// A trained model loaded from a checkpoint.
pub struct CcanModel {
    inner: ccan::model::CcanModel<f32>,
}

/// One bag of patch features with grid coordinates.
pub struct CcanBag {
    inner: FeatureBag,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CcanStatus {
    match e {
        Error::Shape { .. } => CcanStatus::Shape,
        Error::Numeric(_) => CcanStatus::Numeric,
        Error::Usage(_) => CcanStatus::InvalidArgument,
        Error::Config(_) => CcanStatus::Config,
        Error::Data(_) => CcanStatus::Data,
        Error::Format { .. } => CcanStatus::Format,
        Error::Metric(_) => CcanStatus::Metric,
        Error::Io { .. } => CcanStatus::Io,
    }
}

fn fail(status: CcanStatus, msg: impl Into<String>) -> CcanStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), CcanStatus>>(f: F) -> CcanStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcanStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(CcanStatus::Panic, "internal panic"),
    }
}

fn lib<T>(r: ccan::Result<T>) -> Result<T, CcanStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, CcanStatus> {
    if p.is_null() {
        return Err(fail(CcanStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(CcanStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, CcanStatus> {
    p.as_ref()
        .ok_or_else(|| fail(CcanStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), CcanStatus> {
    if p.is_null() {
        Err(fail(CcanStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Loads a checkpoint written by `ccan train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ccan_model_load(path: *const c_char, out: *mut *mut CcanModel) -> CcanStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = path_arg(path)?;
        let inner = lib(ccan::checkpoint::load_checkpoint::<f32>(p))?;
        *out = Box::into_raw(Box::new(CcanModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ccan_model_load`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ccan_model_free(model: *mut CcanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of probabilities [`ccan_predict`] writes: 1 for binary models,
/// the class count otherwise.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccan_model_num_outputs(model: *const CcanModel, out: *mut usize) -> CcanStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let m = deref(model, "model")?;
        *out = m.inner.config().output_dim();
        Ok(())
    })
}

/// Feature width the model expects.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccan_model_feature_dim(model: *const CcanModel, out: *mut usize) -> CcanStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = deref(model, "model")?.inner.config().feature_dim;
        Ok(())
    })
}

/// Reads a bag file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ccan_bag_read(path: *const c_char, out: *mut *mut CcanBag) -> CcanStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = path_arg(path)?;
        let inner = lib(ccan::data::read_bag(p))?;
        *out = Box::into_raw(Box::new(CcanBag { inner }));
        Ok(())
    })
}

/// Builds a bag from `n × dim` row-major features and per-token grid
/// positions on a `grid_rows × grid_cols` grid.
///
/// # Safety
/// `features` must hold `n * dim` floats, `rows` and `cols` `n` values each.
#[no_mangle]
pub unsafe extern "C" fn ccan_bag_from_features(
    features: *const f32,
    n: usize,
    dim: usize,
    rows: *const u32,
    cols: *const u32,
    grid_rows: u32,
    grid_cols: u32,
    out: *mut *mut CcanBag,
) -> CcanStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if features.is_null() || rows.is_null() || cols.is_null() {
            return Err(fail(CcanStatus::NullPointer, "features, rows and cols must be non-null"));
        }
        if n == 0 || dim == 0 {
            return Err(fail(CcanStatus::InvalidArgument, "a bag needs n > 0 and dim > 0"));
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| fail(CcanStatus::InvalidArgument, "n * dim overflows"))?;
        let data = std::slice::from_raw_parts(features, len).to_vec();
        let r = std::slice::from_raw_parts(rows, n);
        let c = std::slice::from_raw_parts(cols, n);
        let positions: Vec<(u32, u32)> = r.iter().copied().zip(c.iter().copied()).collect();
        let tokens = lib(Tensor::new(vec![n, dim], data))?;
        let inner = lib(FeatureBag::new("ffi", "ffi", 0, (grid_rows, grid_cols), &positions, tokens))?;
        *out = Box::into_raw(Box::new(CcanBag { inner }));
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccan_bag_num_tokens(bag: *const CcanBag, out: *mut usize) -> CcanStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = deref(bag, "bag")?.inner.len();
        Ok(())
    })
}

/// # Safety
/// `bag` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ccan_bag_free(bag: *mut CcanBag) {
    if !bag.is_null() {
        drop(Box::from_raw(bag));
    }
}

/// Eval-mode class probabilities averaged over stages. `probs` must have
/// room for [`ccan_model_num_outputs`] values.
///
/// # Safety
/// `probs` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccan_predict(
    model: *const CcanModel,
    bag: *const CcanBag,
    probs: *mut f64,
    len: usize,
) -> CcanStatus {
    guard(|| {
        out_ptr(probs, "probs")?;
        let m = deref(model, "model")?;
        let b = deref(bag, "bag")?;
        let p = lib(m.inner.predict(&b.inner))?;
        if len < p.len() {
            return Err(fail(
                CcanStatus::BufferTooSmall,
                format!("probs holds {len} values, {} needed", p.len()),
            ));
        }
        std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(&p);
        Ok(())
    })
}

/// Per-token attention scores in `[0, 1]`, aggregated over stages.
/// `scores` must have room for [`ccan_bag_num_tokens`] values.
///
/// # Safety
/// `scores` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccan_explain(
    model: *const CcanModel,
    bag: *const CcanBag,
    scores: *mut f64,
    len: usize,
) -> CcanStatus {
    guard(|| {
        out_ptr(scores, "scores")?;
        let m = deref(model, "model")?;
        let b = deref(bag, "bag")?;
        if len < b.inner.len() {
            return Err(fail(
                CcanStatus::BufferTooSmall,
                format!("scores holds {len} values, {} needed", b.inner.len()),
            ));
        }
        let map = lib(ccan::explain::explain_bag(&m.inner, &b.inner))?;
        std::slice::from_raw_parts_mut(scores, map.scores.len()).copy_from_slice(&map.scores);
        Ok(())
    })
}

/// Area under the ROC curve; ties count one half. `labels` are 0 or 1.
///
/// # Safety
/// `scores` and `labels` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn ccan_auc_binary(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> CcanStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if scores.is_null() || labels.is_null() {
            return Err(fail(CcanStatus::NullPointer, "scores and labels must be non-null"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l = std::slice::from_raw_parts(labels, n);
        if let Some(bad) = l.iter().find(|&&v| v > 1) {
            return Err(fail(CcanStatus::InvalidArgument, format!("label {bad} is not 0 or 1")));
        }
        let l: Vec<bool> = l.iter().map(|&v| v == 1).collect();
        *out = lib(ccan::metrics::auc_binary(s, &l))?;
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ccan_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ccan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
