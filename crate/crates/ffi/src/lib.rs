//! C ABI for loading trained checkpoints and scoring text-video pairs.
//!
//! Handles are opaque pointers created by `lpd_model_load` and released by
//! `lpd_model_free`. Every fallible call returns an `LpdStatus`; on failure
//! `lpd_last_error_message` returns a thread-local, NUL-terminated
//! description valid until the next failing call on the same thread.
//!
//! The generated header lands in `include/lpd.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use lpd_core::checkpoint;
use lpd_core::feature_store::Batch;
use lpd_core::model::{forward_spaces, ModelParams};
use lpd_core::numerics::Matrix;

/// ABI revision; bump on any breaking change to this surface.
pub const LPD_ABI_VERSION: u32 = 1;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    LoadFailed = 3,
    ShapeMismatch = 4,
    ScoringFailed = 5,
    BufferTooSmall = 6,
}

/// Opaque model handle.
pub struct LpdModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(msg).unwrap_or_default();
    });
}

fn fail(status: LpdStatus, msg: impl Into<String>) -> LpdStatus {
    set_error(msg);
    status
}

/// ABI revision of this library.
#[no_mangle]
pub extern "C" fn lpd_abi_version() -> u32 {
    LPD_ABI_VERSION
}

/// Message describing the most recent failure on this thread. Never NULL;
/// the pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lpd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// `Ok`, `*out` owns a model that must be released with `lpd_model_free`.
#[no_mangle]
pub unsafe extern "C" fn lpd_model_load(path: *const c_char, out: *mut *mut LpdModel) -> LpdStatus {
    if path.is_null() || out.is_null() {
        return fail(LpdStatus::NullArgument, "path and out must be non-NULL");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return fail(LpdStatus::InvalidUtf8, "path is not valid UTF-8"),
    };
    match checkpoint::load(Path::new(path)) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(LpdModel {
                params: ckpt.params,
            }));
            LpdStatus::Ok
        }
        Err(e) => fail(LpdStatus::LoadFailed, e.to_string()),
    }
}

/// Release a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must be NULL or a pointer returned by `lpd_model_load` that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn lpd_model_free(model: *mut LpdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of text features (k1); 0 on NULL.
///
/// # Safety
/// `model` must be NULL or a live handle from `lpd_model_load`.
#[no_mangle]
pub unsafe extern "C" fn lpd_model_text_features(model: *const LpdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.params.k1() as u32)
}

/// Number of video features (k2); 0 on NULL.
///
/// # Safety
/// `model` must be NULL or a live handle from `lpd_model_load`.
#[no_mangle]
pub unsafe extern "C" fn lpd_model_video_features(model: *const LpdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.params.k2() as u32)
}

/// Common-space dimension d; 0 on NULL.
///
/// # Safety
/// `model` must be NULL or a live handle from `lpd_model_load`.
#[no_mangle]
pub unsafe extern "C" fn lpd_model_common_dim(model: *const LpdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.params.d as u32)
}

unsafe fn write_dims(dims: Vec<usize>, out: *mut u32, len: usize) -> LpdStatus {
    if out.is_null() {
        return fail(LpdStatus::NullArgument, "out must be non-NULL");
    }
    if len < dims.len() {
        return fail(
            LpdStatus::BufferTooSmall,
            format!("need room for {} dims, got {len}", dims.len()),
        );
    }
    for (i, d) in dims.iter().enumerate() {
        *out.add(i) = *d as u32;
    }
    LpdStatus::Ok
}

/// Write the raw input dimension of each text feature into `out`.
///
/// # Safety
/// `model` must be a live handle; `out` must point to at least `len` u32s,
/// with `len >= lpd_model_text_features(model)`.
#[no_mangle]
pub unsafe extern "C" fn lpd_model_text_dims(
    model: *const LpdModel,
    out: *mut u32,
    len: usize,
) -> LpdStatus {
    match model.as_ref() {
        None => fail(LpdStatus::NullArgument, "model must be non-NULL"),
        Some(m) => write_dims(m.params.text_dims(), out, len),
    }
}

/// Write the raw input dimension of each video feature into `out`.
///
/// # Safety
/// Same contract as `lpd_model_text_dims`, with `len >=
/// lpd_model_video_features(model)`.
#[no_mangle]
pub unsafe extern "C" fn lpd_model_video_dims(
    model: *const LpdModel,
    out: *mut u32,
    len: usize,
) -> LpdStatus {
    match model.as_ref() {
        None => fail(LpdStatus::NullArgument, "model must be non-NULL"),
        Some(m) => write_dims(m.params.video_dims(), out, len),
    }
}

unsafe fn gather_features(
    ptrs: *const *const f64,
    lens: *const usize,
    expected_dims: &[usize],
    what: &str,
) -> Result<Vec<Matrix>, LpdStatus> {
    if ptrs.is_null() || lens.is_null() {
        return Err(fail(
            LpdStatus::NullArgument,
            format!("{what} feature pointers must be non-NULL"),
        ));
    }
    let mut out = Vec::with_capacity(expected_dims.len());
    for (i, &dim) in expected_dims.iter().enumerate() {
        let ptr = *ptrs.add(i);
        let len = *lens.add(i);
        if ptr.is_null() {
            return Err(fail(
                LpdStatus::NullArgument,
                format!("{what} feature {i} is NULL"),
            ));
        }
        if len != dim {
            return Err(fail(
                LpdStatus::ShapeMismatch,
                format!("{what} feature {i} has length {len}, model expects {dim}"),
            ));
        }
        let slice = std::slice::from_raw_parts(ptr, len);
        out.push(Matrix::from_vec(1, len, slice.to_vec()).expect("length checked"));
    }
    Ok(out)
}

/// Score one text-video pair from raw feature vectors.
///
/// `text`/`video` are arrays of `k1`/`k2` pointers to f64 vectors whose
/// lengths are given in `text_lens`/`video_lens` and must match the model's
/// feature dims. The aggregate similarity is written to `aggregate_out`;
/// when `per_space_out` is non-NULL it receives k1+k2 per-space scores.
///
/// # Safety
/// All pointers must satisfy the stated shapes; `aggregate_out` must be a
/// valid pointer; `per_space_out` must be NULL or point to k1+k2 f64s.
#[no_mangle]
pub unsafe extern "C" fn lpd_score_pair(
    model: *const LpdModel,
    text: *const *const f64,
    text_lens: *const usize,
    video: *const *const f64,
    video_lens: *const usize,
    aggregate_out: *mut f64,
    per_space_out: *mut f64,
) -> LpdStatus {
    let model = match model.as_ref() {
        None => return fail(LpdStatus::NullArgument, "model must be non-NULL"),
        Some(m) => m,
    };
    if aggregate_out.is_null() {
        return fail(LpdStatus::NullArgument, "aggregate_out must be non-NULL");
    }
    let text_features = match gather_features(text, text_lens, &model.params.text_dims(), "text") {
        Ok(f) => f,
        Err(status) => return status,
    };
    let video_features =
        match gather_features(video, video_lens, &model.params.video_dims(), "video") {
            Ok(f) => f,
            Err(status) => return status,
        };
    let batch = Batch {
        text_ids: vec!["q".into()],
        video_ids: vec!["v".into()],
        text_features,
        video_features,
    };
    match forward_spaces(&batch, &model.params) {
        Ok(cache) => {
            *aggregate_out = cache.sims.aggregate.get(0, 0);
            if !per_space_out.is_null() {
                for (s, m) in cache.sims.per_space.iter().enumerate() {
                    *per_space_out.add(s) = m.get(0, 0);
                }
            }
            LpdStatus::Ok
        }
        Err(e) => fail(LpdStatus::ScoringFailed, e.to_string()),
    }
}
