//! C ABI over the `gwq` library.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a [`GwqStatus`];
//! on failure [`gwq_last_error`] describes the problem. Panics are caught and
//! reported as [`GwqStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gwq::error::ErrorCategory;
use gwq::io::{read_container, read_gradients, read_gwq, write_gradients, write_gwq, ModelBundle};
use gwq::quant::{average_bits, quantize_model, QuantConfig, QuantOptions, QuantizedModel};
use gwq::refmodel::{calibration_gradients, LossKind, TinyTransformer};
use gwq::sensitivity::{aggregate_gradients, mean_gradients, select_outliers, Scope};
use gwq::GwqError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GwqStatus {
    Ok = 0,
    /// Invalid configuration or arguments.
    Usage = 1,
    /// Unreadable or malformed input.
    Data = 2,
    /// An internal consistency check failed.
    Invariant = 3,
    /// A required pointer argument was null.
    NullArgument = 4,
    Panic = 5,
}

/// A dense model (tensor container contents).
pub struct GwqModel {
    bundle: ModelBundle,
}

/// A quantized model.
pub struct GwqQuantized {
    model: QuantizedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &GwqError) -> GwqStatus {
    match e.category() {
        ErrorCategory::Usage => GwqStatus::Usage,
        ErrorCategory::Data => GwqStatus::Data,
        ErrorCategory::Invariant => GwqStatus::Invariant,
    }
}

enum Failure {
    Lib(GwqError),
    Null(&'static str),
}

impl From<GwqError> for Failure {
    fn from(e: GwqError) -> Self {
        Failure::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GwqStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GwqStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(arg))) => {
            set_error(format!("argument `{arg}` is null"));
            GwqStatus::NullArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GwqStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| GwqError::Input(format!("`{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn out_arg<T>(p: *mut T, value: T, name: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    p.write(value);
    Ok(())
}

unsafe fn tokens_arg<'a>(p: *const u32, len: usize) -> Result<&'a [u32], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null("tokens"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Text of the last error on this thread, or NULL after a successful call.
/// The pointer stays valid until the next `gwq_*` call on the same thread.
#[no_mangle]
pub extern "C" fn gwq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gwq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a dense model from a tensor container.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gwq_model_load(path: *const c_char, out: *mut *mut GwqModel) -> GwqStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let bundle = read_container(&path)?;
        out_arg(out, Box::into_raw(Box::new(GwqModel { bundle })), "out")
    })
}

/// Release a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gwq_model_free(model: *mut GwqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tensors in a model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gwq_model_tensor_count(model: *const GwqModel, out: *mut usize) -> GwqStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        out_arg(out, m.bundle.len(), "out")
    })
}

/// Perplexity of the reference decoder over `tokens`.
///
/// # Safety
/// `model` must be a live handle, `tokens` must point to `len` values and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gwq_model_perplexity(
    model: *const GwqModel,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
) -> GwqStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let tokens = tokens_arg(tokens, len)?;
        let t = TinyTransformer::<f32>::from_bundle(&m.bundle)?;
        out_arg(out, t.evaluate(tokens)?.perplexity(), "out")
    })
}

/// Capture calibration gradients from the first `samples` windows of
/// `tokens` and write their mean to `path`.
///
/// # Safety
/// `model` must be a live handle, `tokens` must point to `len` values and
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gwq_gradients_write(
    model: *const GwqModel,
    tokens: *const u32,
    len: usize,
    samples: usize,
    path: *const c_char,
) -> GwqStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let tokens = tokens_arg(tokens, len)?;
        let path = path_arg(path, "path")?;
        let t = TinyTransformer::<f32>::from_bundle(&m.bundle)?;
        let grads = calibration_gradients(&t, tokens, samples, LossKind::default())?;
        write_gradients(&mean_gradients(&grads)?, &path)?;
        Ok(())
    })
}

/// Quantize `model`. Outliers are the top `fraction` of `|g|` per layer from
/// the gradient file at `grads_path`; with a NULL path `fraction` must be 0
/// and the result is plain round-to-nearest.
///
/// # Safety
/// `model` must be a live handle, `grads_path` NULL or a NUL-terminated
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gwq_quantize(
    model: *const GwqModel,
    grads_path: *const c_char,
    bits: u8,
    group_size: u16,
    fraction: f64,
    out: *mut *mut GwqQuantized,
) -> GwqStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let cfg = QuantConfig::new(bits, group_size, fraction as f32)?;
        let opts = QuantOptions::default();
        let mask = if grads_path.is_null() {
            if fraction != 0.0 {
                return Err(GwqError::Config("a nonzero fraction needs a gradient file".into()).into());
            }
            None
        } else if fraction == 0.0 {
            None
        } else {
            let grads = read_gradients(&path_arg(grads_path, "grads_path")?, &m.bundle)?;
            let scores = aggregate_gradients(&[grads])?
                .restrict(|n| m.bundle.get(n).is_some_and(|t| opts.quantize_set.contains(t)));
            Some(select_outliers(&scores, fraction, Scope::PerLayer)?)
        };
        let model = quantize_model(&m.bundle, mask.as_ref(), &cfg, &opts)?;
        out_arg(out, Box::into_raw(Box::new(GwqQuantized { model })), "out")
    })
}

/// Write a quantized model to a GWQ file (atomically).
///
/// # Safety
/// `q` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gwq_quantized_write(q: *const GwqQuantized, path: *const c_char) -> GwqStatus {
    guard(|| {
        let q = ref_arg(q, "q")?;
        write_gwq(&q.model, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Read a GWQ file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gwq_quantized_read(path: *const c_char, out: *mut *mut GwqQuantized) -> GwqStatus {
    guard(|| {
        let model = read_gwq(&path_arg(path, "path")?)?;
        out_arg(out, Box::into_raw(Box::new(GwqQuantized { model })), "out")
    })
}

/// Dense reconstruction of a quantized model as a new model handle.
///
/// # Safety
/// `q` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gwq_quantized_dequantize(q: *const GwqQuantized, out: *mut *mut GwqModel) -> GwqStatus {
    guard(|| {
        let q = ref_arg(q, "q")?;
        let bundle = q.model.to_bundle();
        out_arg(out, Box::into_raw(Box::new(GwqModel { bundle })), "out")
    })
}

/// Payload bits per quantized weight (codes, scales, zeros and outliers).
///
/// # Safety
/// `q` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gwq_quantized_average_bits(q: *const GwqQuantized, out: *mut f64) -> GwqStatus {
    guard(|| {
        let q = ref_arg(q, "q")?;
        out_arg(out, average_bits(&q.model).average(), "out")
    })
}

/// Release a quantized handle. NULL is ignored.
///
/// # Safety
/// `q` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gwq_quantized_free(q: *mut GwqQuantized) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}
