//! C ABI for the inference path: load a checkpoint, enumerate its domain
//! heads, run per-domain prediction, and strip checkpoints for deployment.
//!
//! Conventions shared by every function:
//!
//! * Handles are opaque pointers created by `sst_model_load` and released
//!   by `sst_model_free`; no struct layout is exposed.
//! * Every fallible function returns an [`SstStatus`]; on failure a
//!   human-readable message is stored per thread and retrievable with
//!   `sst_last_error`.
//! * String outputs follow the `snprintf` convention: the result is
//!   NUL-terminated and truncated to the caller's buffer, and the required
//!   length (excluding the NUL) is reported so callers can retry with a
//!   larger buffer.
//! * Panics never unwind across the boundary; they are caught and reported
//!   as [`SstStatus::Panic`].
//!
//! The generated header lives at `include/sst.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sst_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use sst_core::error::SstError;
use sst_core::eval::export_inference;
use sst_core::imgio::RgbImage;
use sst_core::net::predict;
use sst_core::params::ParamStore;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SstStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The request itself is wrong: bad path, unknown domain, malformed
    /// input dimensions, malformed checkpoint.
    Usage = 3,
    /// The request was well-formed but execution failed.
    Runtime = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

/// A loaded model: checkpoint parameters plus its metadata.  Opaque.
pub struct SstModel {
    store: ParamStore,
    meta: CheckpointMeta,
    /// Domain ids with a prediction head, sorted.
    domains: Vec<String>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    // Interior NULs cannot come from our error types; strip defensively.
    let clean: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("no interior NUL"));
}

fn status_of(err: &SstError) -> SstStatus {
    if err.is_usage() || matches!(err, SstError::Checkpoint(_)) {
        SstStatus::Usage
    } else {
        SstStatus::Runtime
    }
}

fn fail(err: SstError) -> SstStatus {
    let status = status_of(&err);
    set_last_error(&err.to_string());
    status
}

/// Run `body` with panics converted to [`SstStatus::Panic`].
fn guarded(body: impl FnOnce() -> SstStatus) -> SstStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            SstStatus::Panic
        }
    }
}

/// Parse a `*const c_char` into `&str`, reporting null/UTF-8 failures.
///
/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn take_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SstStatus> {
    if ptr.is_null() {
        set_last_error(&format!("{what} is null"));
        return Err(SstStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error(&format!("{what} is not valid UTF-8"));
        SstStatus::InvalidUtf8
    })
}

/// Copy `s` into `(buf, cap)` with truncation and NUL termination, and
/// report the full length (excluding the NUL) through `out_len` when it is
/// non-null.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes of writes; `out_len` must be
/// null or valid for writes.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, out_len: *mut usize) {
    if !out_len.is_null() {
        *out_len = s.len();
    }
    if buf.is_null() || cap == 0 {
        return;
    }
    let n = s.len().min(cap - 1);
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), n);
    *buf.add(n) = 0;
}

/// Library version as a static NUL-terminated string; never null, never
/// freed by the caller.
#[no_mangle]
pub extern "C" fn sst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Retrieve the last error message recorded on this thread (snprintf
/// convention; see the module docs).  Returns the full message length
/// excluding the NUL.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn sst_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let s = msg.to_str().unwrap_or_default();
        let mut len = 0usize;
        write_str(s, buf, cap, &mut len);
        len
    })
}

/// Load a checkpoint directory into a model handle.  On success `*out`
/// owns the model; release it with `sst_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string valid for reads; `out` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sst_model_load(path: *const c_char, out: *mut *mut SstModel) -> SstStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("out is null");
            return SstStatus::NullArgument;
        }
        let path = match take_str(path, "path") {
            Ok(s) => Path::new(s),
            Err(status) => return status,
        };
        if !path.exists() {
            return fail(SstError::Config(format!(
                "checkpoint not found: {}",
                path.display()
            )));
        }
        match load_checkpoint(path) {
            Ok((store, meta)) => {
                let mut domains: Vec<String> = store
                    .iter()
                    .filter_map(|(_, e)| e.tag.strip_prefix("head:"))
                    .map(str::to_string)
                    .collect();
                domains.sort();
                domains.dedup();
                *out = Box::into_raw(Box::new(SstModel {
                    store,
                    meta,
                    domains,
                }));
                SstStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a model handle.  Null is a no-op.  The handle must not be used
/// afterwards.
///
/// # Safety
/// `model` must be null or a pointer returned by `sst_model_load` that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn sst_model_free(model: *mut SstModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn deref_model<'a>(model: *const SstModel) -> Result<&'a SstModel, SstStatus> {
    if model.is_null() {
        set_last_error("model is null");
        return Err(SstStatus::NullArgument);
    }
    Ok(&*model)
}

/// Total parameter count of the loaded model.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sst_model_num_params(
    model: *const SstModel,
    out: *mut usize,
) -> SstStatus {
    guarded(|| {
        let m = match deref_model(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        if out.is_null() {
            set_last_error("out is null");
            return SstStatus::NullArgument;
        }
        *out = m.store.numel();
        SstStatus::Ok
    })
}

/// Number of domains the model carries a prediction head for.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sst_model_domain_count(
    model: *const SstModel,
    out: *mut usize,
) -> SstStatus {
    guarded(|| {
        let m = match deref_model(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        if out.is_null() {
            set_last_error("out is null");
            return SstStatus::NullArgument;
        }
        *out = m.domains.len();
        SstStatus::Ok
    })
}

/// Name of the `index`-th domain head, in sorted order (snprintf
/// convention; see the module docs).
///
/// # Safety
/// `model` must be a live handle; `buf` must be null or valid for `cap`
/// bytes of writes; `out_len` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sst_model_domain_name(
    model: *const SstModel,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> SstStatus {
    guarded(|| {
        let m = match deref_model(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let Some(name) = m.domains.get(index) else {
            return fail(SstError::Config(format!(
                "domain index {index} out of range ({} heads)",
                m.domains.len()
            )));
        };
        write_str(name, buf, cap, out_len);
        SstStatus::Ok
    })
}

/// Hash of the domain registry this model was trained against (snprintf
/// convention; see the module docs).  Predictions are only meaningful on
/// data from a registry with the same hash.
///
/// # Safety
/// `model` must be a live handle; `buf` must be null or valid for `cap`
/// bytes of writes; `out_len` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sst_model_registry_hash(
    model: *const SstModel,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> SstStatus {
    guarded(|| {
        let m = match deref_model(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        write_str(&m.meta.registry_hash, buf, cap, out_len);
        SstStatus::Ok
    })
}

/// Number of label classes predicted by `domain`'s head; this is the
/// per-pixel label range `[0, n)` of `sst_predict` output.
///
/// # Safety
/// `model` must be a live handle; `domain` must be a NUL-terminated string
/// valid for reads; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sst_model_num_labels(
    model: *const SstModel,
    domain: *const c_char,
    out: *mut usize,
) -> SstStatus {
    guarded(|| {
        let m = match deref_model(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let domain = match take_str(domain, "domain") {
            Ok(s) => s,
            Err(status) => return status,
        };
        if out.is_null() {
            set_last_error("out is null");
            return SstStatus::NullArgument;
        }
        let name = format!("head.{domain}.b");
        if !m.store.contains(&name) {
            return fail(SstError::Config(format!(
                "model has no head for domain '{domain}'"
            )));
        }
        *out = m.store.get(&name).shape()[0];
        SstStatus::Ok
    })
}

/// Predict per-pixel labels for one image with `domain`'s head.
///
/// `pixels` is interleaved 8-bit RGB, row-major, `height * width * 3`
/// bytes.  `out_labels` receives `height * width` label indices.  Height
/// and width must be multiples of the network's reduction factor (16) and
/// at least one factor each.
///
/// # Safety
/// `model` must be a live handle; `domain` must be a NUL-terminated string
/// valid for reads; `pixels` must be valid for `height * width * 3` bytes
/// of reads; `out_labels` must be valid for `height * width` bytes of
/// writes.
#[no_mangle]
pub unsafe extern "C" fn sst_predict(
    model: *const SstModel,
    domain: *const c_char,
    pixels: *const u8,
    height: usize,
    width: usize,
    out_labels: *mut u8,
) -> SstStatus {
    guarded(|| {
        let m = match deref_model(model) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let domain = match take_str(domain, "domain") {
            Ok(s) => s,
            Err(status) => return status,
        };
        if pixels.is_null() || out_labels.is_null() {
            set_last_error("pixels/out_labels is null");
            return SstStatus::NullArgument;
        }
        if height == 0 || width == 0 {
            return fail(SstError::Shape(format!(
                "image dimensions {height}x{width} must be positive"
            )));
        }
        let image = RgbImage {
            width,
            height,
            data: std::slice::from_raw_parts(pixels, height * width * 3).to_vec(),
        };
        match predict(&m.store, domain, &sst_core::dataset::image_to_tensor(&image)) {
            Ok(labels) => {
                std::ptr::copy_nonoverlapping(labels.data.as_ptr(), out_labels, height * width);
                SstStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Strip the checkpoint at `src` down to the core network plus the heads
/// named in `domains` (comma-separated) and write it to `dst`.  The export
/// verifies that the stripped model's logits are bitwise identical to the
/// full model's before writing.
///
/// # Safety
/// `src`, `domains` and `dst` must be NUL-terminated strings valid for
/// reads.
#[no_mangle]
pub unsafe extern "C" fn sst_export(
    src: *const c_char,
    domains: *const c_char,
    dst: *const c_char,
) -> SstStatus {
    guarded(|| {
        let src = match take_str(src, "src") {
            Ok(s) => Path::new(s),
            Err(status) => return status,
        };
        let domains = match take_str(domains, "domains") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let dst = match take_str(dst, "dst") {
            Ok(s) => Path::new(s),
            Err(status) => return status,
        };
        if !src.exists() {
            return fail(SstError::Config(format!(
                "checkpoint not found: {}",
                src.display()
            )));
        }
        let list: Vec<String> = domains
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let run = || -> Result<(), SstError> {
            let (store, meta) = load_checkpoint(src)?;
            let (stripped, stripped_meta) = export_inference(&store, &meta, &list)?;
            save_checkpoint(dst, &stripped, &stripped_meta)
        };
        match run() {
            Ok(()) => SstStatus::Ok,
            Err(e) => fail(e),
        }
    })
}
