//! C ABI for the stogate library.
//!
//! Handles are opaque pointers created and destroyed by this module; every
//! fallible call returns a [`StogateStatus`] and leaves a human-readable
//! message retrievable with [`stogate_last_error`] on failure. The header
//! `include/stogate.h` is generated at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use stogate::data::Dataset;
use stogate::math::{Matrix, RngStream};
use stogate::network::{load_checkpoint, predictions, GatedModel, Mode};
use stogate::train::evaluate;
use stogate::verify::{run_all, VerifySettings};
use stogate::Error;

/// Result of every fallible call in this API.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StogateStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were structurally valid but semantically wrong
    /// (bad dimensions, values out of range, malformed config).
    InvalidArgument = 2,
    /// A path or string was not valid UTF-8.
    Utf8 = 3,
    /// The underlying file could not be read or written.
    Io = 4,
    /// Checkpoint or JSON payload failed to parse or validate.
    Format = 5,
    /// Everything else, including panics caught at the boundary.
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> StogateStatus {
    match err {
        Error::DimensionMismatch(_) | Error::InvalidParameter(_) | Error::Config(_) => {
            StogateStatus::InvalidArgument
        }
        Error::UnsupportedKind(_) => StogateStatus::InvalidArgument,
        Error::Io(_) => StogateStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Checkpoint(_) => StogateStatus::Format,
        Error::Calibration(_) | Error::Diverged(_) => StogateStatus::Internal,
    }
}

fn fail(err: &Error) -> StogateStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Run a closure, translating panics into `Internal` instead of unwinding
/// across the C boundary.
fn guarded(f: impl FnOnce() -> StogateStatus) -> StogateStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            StogateStatus::Internal
        }
    }
}

/// Message for the most recent failure on this thread.
///
/// The pointer stays valid until the next failing call on the same thread.
/// Never null; the message is empty if nothing has failed yet.
#[no_mangle]
pub extern "C" fn stogate_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Logistic sigmoid 1/(1+exp(-a)).
#[no_mangle]
pub extern "C" fn stogate_sigm(a: f64) -> f64 {
    stogate::math::sigm(a)
}

/// Softplus log(1+exp(a)), the mean output of a logistic-noise rectifier.
#[no_mangle]
pub extern "C" fn stogate_softplus(a: f64) -> f64 {
    stogate::math::softplus(a)
}

/// Inverse sigmoid. Returns NaN outside (0,1).
#[no_mangle]
pub extern "C" fn stogate_logit(p: f64) -> f64 {
    if p > 0.0 && p < 1.0 {
        stogate::math::logit(p)
    } else {
        f64::NAN
    }
}

/// Counter-based random stream; same (seed, stream) always yields the same
/// sequence regardless of platform.
pub struct StogateRng(RngStream);

/// Create a random stream. Never fails; free with [`stogate_rng_free`].
#[no_mangle]
pub extern "C" fn stogate_rng_new(seed: u64, stream: u64) -> *mut StogateRng {
    Box::into_raw(Box::new(StogateRng(RngStream::new(seed, stream))))
}

/// Destroy a stream created by [`stogate_rng_new`]. Null is a no-op.
///
/// # Safety
/// `rng` must be a pointer returned by [`stogate_rng_new`] that has not been
/// freed already.
#[no_mangle]
pub unsafe extern "C" fn stogate_rng_free(rng: *mut StogateRng) {
    if !rng.is_null() {
        drop(unsafe { Box::from_raw(rng) });
    }
}

/// Next uniform double in [0,1). Returns NaN if `rng` is null.
///
/// # Safety
/// `rng` must be a live pointer from [`stogate_rng_new`].
#[no_mangle]
pub unsafe extern "C" fn stogate_rng_uniform(rng: *mut StogateRng) -> f64 {
    match unsafe { rng.as_mut() } {
        Some(r) => r.0.next_f64(),
        None => {
            set_error("rng is null");
            f64::NAN
        }
    }
}

/// Trained gated model loaded from a checkpoint file.
pub struct StogateModel(GatedModel);

/// Load a model from a JSON checkpoint written by the `stogate` trainer.
///
/// On success writes the new handle to `*out` and returns `Ok`; free it
/// with [`stogate_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stogate_model_load(
    path: *const c_char,
    out: *mut *mut StogateModel,
) -> StogateStatus {
    if path.is_null() || out.is_null() {
        set_error("path and out must be non-null");
        return StogateStatus::NullArgument;
    }
    let path = match unsafe { CStr::from_ptr(path) }.to_str() {
        Ok(s) => s.to_owned(),
        Err(e) => {
            set_error(&format!("path is not UTF-8: {e}"));
            return StogateStatus::Utf8;
        }
    };
    guarded(|| match load_checkpoint(Path::new(&path)) {
        Ok(model) => {
            unsafe { *out = Box::into_raw(Box::new(StogateModel(model))) };
            StogateStatus::Ok
        }
        Err(e) => fail(&e),
    })
}

/// Destroy a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by [`stogate_model_load`] that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn stogate_model_free(model: *mut StogateModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Model shape: input dimension, gater bottleneck width, gate count, classes.
/// Any of the output pointers may be null to skip that field.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stogate_model_dims(
    model: *const StogateModel,
    d: *mut usize,
    m: *mut usize,
    n: *mut usize,
    classes: *mut usize,
) -> StogateStatus {
    let Some(model) = (unsafe { model.as_ref() }) else {
        set_error("model is null");
        return StogateStatus::NullArgument;
    };
    unsafe {
        if !d.is_null() {
            *d = model.0.layer.d();
        }
        if !m.is_null() {
            *m = model.0.layer.m();
        }
        if !n.is_null() {
            *n = model.0.layer.n();
        }
        if !classes.is_null() {
            *classes = model.0.classes();
        }
    }
    StogateStatus::Ok
}

fn matrix_from(x: *const f64, rows: usize, dim: usize) -> Result<Matrix, StogateStatus> {
    if rows == 0 || dim == 0 {
        set_error("rows and dim must be positive");
        return Err(StogateStatus::InvalidArgument);
    }
    let data = unsafe { std::slice::from_raw_parts(x, rows * dim) };
    let mut m = Matrix::zeros(rows, dim);
    m.data_mut().copy_from_slice(data);
    Ok(m)
}

/// Deterministic test-mode prediction. `x` is row-major `rows x dim`;
/// `out_labels` receives `rows` class indices. Uses the sparse execution
/// path; only gates past the calibrated threshold fire.
///
/// # Safety
/// `x` must point to `rows*dim` doubles and `out_labels` to `rows` u32.
#[no_mangle]
pub unsafe extern "C" fn stogate_model_predict(
    model: *const StogateModel,
    x: *const f64,
    rows: usize,
    dim: usize,
    out_labels: *mut u32,
) -> StogateStatus {
    if model.is_null() || x.is_null() || out_labels.is_null() {
        set_error("model, x and out_labels must be non-null");
        return StogateStatus::NullArgument;
    }
    let model = unsafe { &(*model).0 };
    if dim != model.layer.d() {
        set_error(&format!("dim {} does not match model input {}", dim, model.layer.d()));
        return StogateStatus::InvalidArgument;
    }
    guarded(|| {
        let xm = match matrix_from(x, rows, dim) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let ids: Vec<u64> = (0..rows as u64).collect();
        let rng = RngStream::new(0, 0);
        match model.forward(&xm, Mode::Test, &rng, &ids, true) {
            Ok(fwd) => {
                let preds = predictions(&fwd.logits);
                let out = unsafe { std::slice::from_raw_parts_mut(out_labels, rows) };
                for (o, p) in out.iter_mut().zip(preds) {
                    *o = p as u32;
                }
                StogateStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Evaluation summary over a labelled batch.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct StogateEval {
    /// Fraction of rows whose argmax prediction differs from the label.
    pub error_rate: f64,
    /// Mean cross-entropy.
    pub mean_loss: f64,
    /// Fraction of gates open under the calibrated threshold.
    pub active_fraction: f64,
    /// Expert multiply-accumulates actually done over the dense count.
    pub mac_ratio: f64,
}

/// Evaluate on a labelled batch. Labels must be in `[0, classes)`.
///
/// # Safety
/// `x` must point to `rows*dim` doubles, `labels` to `rows` bytes, and `out`
/// to a [`StogateEval`].
#[no_mangle]
pub unsafe extern "C" fn stogate_model_evaluate(
    model: *const StogateModel,
    x: *const f64,
    labels: *const u8,
    rows: usize,
    dim: usize,
    out: *mut StogateEval,
) -> StogateStatus {
    if model.is_null() || x.is_null() || labels.is_null() || out.is_null() {
        set_error("model, x, labels and out must be non-null");
        return StogateStatus::NullArgument;
    }
    let model = unsafe { &(*model).0 };
    if dim != model.layer.d() {
        set_error(&format!("dim {} does not match model input {}", dim, model.layer.d()));
        return StogateStatus::InvalidArgument;
    }
    let label_slice = unsafe { std::slice::from_raw_parts(labels, rows) };
    let classes = model.classes();
    if let Some(&bad) = label_slice.iter().find(|&&l| l as usize >= classes) {
        set_error(&format!("label {bad} out of range for {classes} classes"));
        return StogateStatus::InvalidArgument;
    }
    guarded(|| {
        let inputs = match matrix_from(x, rows, dim) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let data = Dataset { inputs, labels: label_slice.to_vec(), classes };
        match evaluate(model, &data, 256) {
            Ok(r) => {
                let dense = r.macs.expert_macs_dense;
                unsafe {
                    *out = StogateEval {
                        error_rate: r.error_rate,
                        mean_loss: r.mean_loss,
                        active_fraction: r.s_e,
                        mac_ratio: if dense == 0 {
                            0.0
                        } else {
                            r.macs.expert_macs_sparse as f64 / dense as f64
                        },
                    };
                }
                StogateStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Run the statistical verification suites (estimator unbiasedness, optimal
/// baseline, noise statistics, moment identities, sign agreement).
///
/// Zero `problems`, `mc_samples`, `rect_samples` or `st_trials` select the
/// full default scale. Writes 1 to `*out_passed` if every check passed.
///
/// # Safety
/// `out_passed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stogate_verify(
    seed: u64,
    problems: usize,
    mc_samples: usize,
    rect_samples: usize,
    st_trials: usize,
    out_passed: *mut u8,
) -> StogateStatus {
    if out_passed.is_null() {
        set_error("out_passed must be non-null");
        return StogateStatus::NullArgument;
    }
    let defaults = VerifySettings::default();
    let settings = VerifySettings {
        seed,
        unbiasedness_problems: if problems == 0 { defaults.unbiasedness_problems } else { problems },
        mc_samples: if mc_samples == 0 { defaults.mc_samples } else { mc_samples },
        rect_samples: if rect_samples == 0 { defaults.rect_samples } else { rect_samples },
        st_trials: if st_trials == 0 { defaults.st_trials } else { st_trials },
        estimator_bias: 0.0,
    };
    guarded(|| {
        let report = run_all(&settings);
        unsafe { *out_passed = report.passed as u8 };
        StogateStatus::Ok
    })
}
