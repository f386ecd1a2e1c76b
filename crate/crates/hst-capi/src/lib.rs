//! C ABI over the hierarchical state tokenizer.
//!
//! Conventions:
//! * Every fallible call returns an [`HstStatus`]; `HST_STATUS_OK` is 0.
//! * On failure, a thread-local message is retrievable with
//!   [`hst_last_error`].
//! * Handles (`HstDataset`, `HstModelHandle`) are opaque; free them with the
//!   matching `_free` function exactly once. Passing null where a handle is
//!   required yields `HST_STATUS_NULL_POINTER`.
//! * Matrix buffers are row-major `double` arrays, one row per time point.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use hst_core::checkpoint::HstCheckpoint;
use hst_core::dataio::{load_dataset, prepare_windows, TimeSeriesRecord};
use hst_core::error::HstError;
use hst_core::linalg::Mat;
use hst_core::model::HstModel;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HstStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Config = 6,
    Checkpoint = 7,
    Shape = 8,
    Training = 9,
    BufferTooSmall = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &HstError) -> HstStatus {
    match err {
        HstError::Io { .. } => HstStatus::Io,
        HstError::Manifest { .. } => HstStatus::Validation,
        HstError::Parse { .. } => HstStatus::Parse,
        HstError::Validation(_) => HstStatus::Validation,
        HstError::Config(_) => HstStatus::Config,
        HstError::Shape(_) => HstStatus::Shape,
        HstError::Training { .. } => HstStatus::Training,
        HstError::Checkpoint(_)
        | HstError::CheckpointVersion { .. }
        | HstError::CheckpointChecksum => HstStatus::Checkpoint,
    }
}

fn fail(err: HstError) -> HstStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

unsafe fn path_from(ptr_: *const c_char) -> Result<std::path::PathBuf, HstStatus> {
    if ptr_.is_null() {
        set_error("null path");
        return Err(HstStatus::NullPointer);
    }
    match unsafe { CStr::from_ptr(ptr_) }.to_str() {
        Ok(s) => Ok(std::path::PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(HstStatus::InvalidUtf8)
        }
    }
}

// ---------------------------------------------------------------------------
// Version + error text
// ---------------------------------------------------------------------------

/// Library version as a static null-terminated string.
#[no_mangle]
pub extern "C" fn hst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message (UTF-8, null-terminated) into `buf`.
/// Returns the full message length in bytes (excluding the terminator);
/// call with `cap == 0` to query the required capacity.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null with
/// `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn hst_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                // Always terminate.
                *buf.add(n.saturating_sub(1)) = 0;
            }
        }
        bytes.len() - 1
    })
}

// ---------------------------------------------------------------------------
// Dataset handle
// ---------------------------------------------------------------------------

/// Opaque dataset: the records of one manifest.
pub struct HstDataset {
    records: Vec<TimeSeriesRecord>,
}

/// Load a manifest (CSV with header `subject_id,path,label,site`).
///
/// # Safety
/// `manifest_path` must be a null-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn hst_dataset_load(
    manifest_path: *const c_char,
    out: *mut *mut HstDataset,
) -> HstStatus {
    if out.is_null() {
        set_error("null output handle");
        return HstStatus::NullPointer;
    }
    let path = match unsafe { path_from(manifest_path) } {
        Ok(p) => p,
        Err(code) => return code,
    };
    match load_dataset(&path) {
        Ok(records) => {
            unsafe { *out = Box::into_raw(Box::new(HstDataset { records })) };
            HstStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Number of records in the dataset; 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle from [`hst_dataset_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn hst_dataset_len(ds: *const HstDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    unsafe { &*ds }.records.len()
}

/// Copy subject `idx`'s id into `buf` (see [`hst_last_error`] conventions).
/// Returns the id length, or 0 for a bad handle/index.
///
/// # Safety
/// `ds` must be live; `buf` must hold `cap` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn hst_dataset_subject_id(
    ds: *const HstDataset,
    idx: usize,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    if ds.is_null() {
        return 0;
    }
    let ds = unsafe { &*ds };
    let Some(rec) = ds.records.get(idx) else { return 0 };
    let bytes = rec.subject_id.as_bytes();
    if !buf.is_null() && cap > 0 {
        let n = bytes.len().min(cap - 1);
        unsafe {
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
    }
    bytes.len()
}

/// Label of subject `idx` (or `i64::MIN` on a bad handle/index).
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hst_dataset_label(ds: *const HstDataset, idx: usize) -> i64 {
    if ds.is_null() {
        return i64::MIN;
    }
    unsafe { &*ds }.records.get(idx).map(|r| r.label).unwrap_or(i64::MIN)
}

/// Release a dataset handle. Null is a no-op.
///
/// # Safety
/// Call at most once per handle.
#[no_mangle]
pub unsafe extern "C" fn hst_dataset_free(ds: *mut HstDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

// ---------------------------------------------------------------------------
// Model handle
// ---------------------------------------------------------------------------

/// Opaque model restored from a checkpoint.
pub struct HstModelHandle {
    model: HstModel,
}

/// Load a checkpoint from disk and rebuild the model it describes.
///
/// # Safety
/// `ckpt_path` must be a null-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hst_model_load(
    ckpt_path: *const c_char,
    out: *mut *mut HstModelHandle,
) -> HstStatus {
    if out.is_null() {
        set_error("null output handle");
        return HstStatus::NullPointer;
    }
    let path = match unsafe { path_from(ckpt_path) } {
        Ok(p) => p,
        Err(code) => return code,
    };
    let ckpt = match HstCheckpoint::load(&path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match ckpt.into_model() {
        Ok(model) => {
            unsafe { *out = Box::into_raw(Box::new(HstModelHandle { model })) };
            HstStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// Call at most once per handle.
#[no_mangle]
pub unsafe extern "C" fn hst_model_free(m: *mut HstModelHandle) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Window length the model tokenizes with (0 on null).
///
/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hst_model_window(m: *const HstModelHandle) -> usize {
    if m.is_null() {
        return 0;
    }
    unsafe { &*m }.model.cfg.window.w
}

/// Number of input channels the model expects (0 on null).
///
/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hst_model_channels(m: *const HstModelHandle) -> usize {
    if m.is_null() {
        return 0;
    }
    unsafe { &*m }.model.cfg.m
}

/// First-level state vocabulary size (0 on null).
///
/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hst_model_k_state(m: *const HstModelHandle) -> usize {
    if m.is_null() {
        return 0;
    }
    unsafe { &*m }.model.cfg.codebooks.k_state
}

fn build_record(data: *const f64, t_len: usize, channels: usize) -> Result<TimeSeriesRecord, HstStatus> {
    if data.is_null() {
        set_error("null data pointer");
        return Err(HstStatus::NullPointer);
    }
    if t_len == 0 || channels == 0 {
        set_error("t_len and channels must be positive");
        return Err(HstStatus::Shape);
    }
    let slice = unsafe { std::slice::from_raw_parts(data, t_len * channels) };
    if slice.iter().any(|v| !v.is_finite()) {
        set_error("input matrix contains non-finite values");
        return Err(HstStatus::Validation);
    }
    Ok(TimeSeriesRecord {
        subject_id: "ffi".to_string(),
        x: Mat::from_vec(t_len, channels, slice.to_vec()),
        label: 0,
        site: None,
        true_states: None,
    })
}

/// Tokenize a `t_len x channels` row-major series. The series is z-scored and
/// sliced into the model's windows; tokens for all full windows are written
/// sequentially. Call with null token buffers to query the required length
/// via `out_len`. Buffers shorter than the required length yield
/// `HST_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// `data` must hold `t_len * channels` doubles; each non-null token buffer
/// must hold `cap` entries; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hst_model_tokenize(
    m: *const HstModelHandle,
    data: *const f64,
    t_len: usize,
    channels: usize,
    state_tokens: *mut u32,
    transition_tokens: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> HstStatus {
    if m.is_null() || out_len.is_null() {
        set_error("null handle or output pointer");
        return HstStatus::NullPointer;
    }
    let model = &unsafe { &*m }.model;
    if channels != model.cfg.m {
        set_error("channel count does not match the model");
        return HstStatus::Shape;
    }
    let record = match build_record(data, t_len, channels) {
        Ok(r) => r,
        Err(code) => return code,
    };
    let (windows, _) = match prepare_windows(std::slice::from_ref(&record), &model.cfg.window) {
        Ok(w) => w,
        Err(e) => return fail(e),
    };
    let total = windows.len() * model.cfg.window.w;
    unsafe { *out_len = total };
    if state_tokens.is_null() && transition_tokens.is_null() {
        return HstStatus::Ok; // capacity query
    }
    if cap < total {
        set_error("token buffer too small");
        return HstStatus::BufferTooSmall;
    }
    let mut offset = 0usize;
    for w in &windows {
        let seq = match model.tokenize_window(&w.x) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        for t in 0..seq.state_tokens.len() {
            unsafe {
                if !state_tokens.is_null() {
                    *state_tokens.add(offset + t) = seq.state_tokens[t] as u32;
                }
                if !transition_tokens.is_null() {
                    *transition_tokens.add(offset + t) = seq.transition_tokens[t] as u32;
                }
            }
        }
        offset += seq.state_tokens.len();
    }
    HstStatus::Ok
}

/// Reconstruct the first window of a series; writes the `W x channels`
/// reconstruction (row-major) plus the window's Pearson r and MSE.
///
/// # Safety
/// `data` must hold `t_len * channels` doubles; `out_xhat` (if non-null) must
/// hold `W * channels` doubles; `out_r` / `out_mse` (if non-null) one double.
#[no_mangle]
pub unsafe extern "C" fn hst_model_reconstruct_first_window(
    m: *const HstModelHandle,
    data: *const f64,
    t_len: usize,
    channels: usize,
    out_xhat: *mut f64,
    out_r: *mut f64,
    out_mse: *mut f64,
) -> HstStatus {
    if m.is_null() {
        set_error("null model handle");
        return HstStatus::NullPointer;
    }
    let model = &unsafe { &*m }.model;
    if channels != model.cfg.m {
        set_error("channel count does not match the model");
        return HstStatus::Shape;
    }
    let record = match build_record(data, t_len, channels) {
        Ok(r) => r,
        Err(code) => return code,
    };
    let (windows, _) = match prepare_windows(std::slice::from_ref(&record), &model.cfg.window) {
        Ok(w) => w,
        Err(e) => return fail(e),
    };
    let Some(first) = windows.first() else {
        set_error("series shorter than one window");
        return HstStatus::Validation;
    };
    match model.reconstruct_window(&first.x) {
        Ok((x_hat, r, mse)) => {
            unsafe {
                if !out_xhat.is_null() {
                    ptr::copy_nonoverlapping(x_hat.as_slice().as_ptr(), out_xhat, x_hat.len());
                }
                if !out_r.is_null() {
                    *out_r = r;
                }
                if !out_mse.is_null() {
                    *out_mse = mse;
                }
            }
            HstStatus::Ok
        }
        Err(e) => fail(e),
    }
}
