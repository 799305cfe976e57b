//! C ABI over `safeshield-core`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every function returns an [`SsStatus`];
//! on failure, [`ss_last_error_message`] describes the error for the calling
//! thread. Panics are caught and reported as [`SsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use safeshield_core::demonstrations::DemoCorpus;
use safeshield_core::dynamics::DynamicsModel;
use safeshield_core::filter::{filter, FilterConfig};
use safeshield_core::io::{self, ModelFileV1};
use safeshield_core::learner::{learn, LearnConfig};
use safeshield_core::qp::SolverStatus;
use safeshield_core::rbf::SafetyModel;
use safeshield_core::simgen::{generate, GenSpec, Scenario};
use safeshield_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    SolverFailure = 4,
    Panic = 5,
}

/// A demonstration corpus.
pub struct SsCorpus {
    corpus: DemoCorpus,
}

/// A learned safety value function with its dynamics.
pub struct SsModel {
    file: ModelFileV1,
    model: SafetyModel,
    dynamics: DynamicsModel,
}

impl SsModel {
    fn new(file: ModelFileV1) -> Result<Self, Error> {
        Ok(Self {
            model: file.model()?,
            dynamics: DynamicsModel::new(file.dynamics),
            file,
        })
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(SsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Solver(_) | Error::NotPsd => SsStatus::SolverFailure,
            Error::InvalidArgument(_) | Error::Dimension { .. } | Error::UnknownDynamics(_) => SsStatus::InvalidArgument,
            _ => SsStatus::DataError,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            SsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SsStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a corpus file's JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_corpus_load_json(json: *const c_char, out: *mut *mut SsCorpus) -> SsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let corpus = io::corpus_from_str(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(SsCorpus { corpus }));
        Ok(())
    })
}

/// Generates a synthetic corpus from a named preset (`default` or
/// `prefix_overlap`) on the built-in scenario.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_corpus_generate(preset: *const c_char, seed: u64, out: *mut *mut SsCorpus) -> SsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut spec = GenSpec::preset(str_arg(preset, "preset")?)?;
        spec.seed = seed;
        let corpus = generate(&Scenario::default(), &spec)?;
        *out = Box::into_raw(Box::new(SsCorpus { corpus }));
        Ok(())
    })
}

/// Number of demonstrations in the corpus.
///
/// # Safety
/// `corpus` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_corpus_len(corpus: *const SsCorpus, out: *mut usize) -> SsStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        *out_arg(out, "out")? = c.corpus.demos.len();
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_corpus_free(corpus: *mut SsCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Learns a model. `config_json` may be null for the defaults. Fails with
/// [`SsStatus::SolverFailure`] unless the solver reaches optimality.
///
/// # Safety
/// `corpus` must be a live handle, `config_json` null or NUL-terminated, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_learn(corpus: *const SsCorpus, config_json: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = &corpus.as_ref().ok_or_else(|| null("corpus"))?.corpus;
        let cfg = if config_json.is_null() {
            LearnConfig::default()
        } else {
            io::config_from_str(str_arg(config_json, "config_json")?)?
        };
        let errors = c.validate();
        if !errors.is_empty() {
            return Err(Error::Validation(errors).into());
        }
        let result = learn(c, &cfg)?;
        if result.solver_status != SolverStatus::Optimal {
            return Err(Failure(
                SsStatus::SolverFailure,
                format!("solver finished with status {:?}", result.solver_status),
            ));
        }
        let file = ModelFileV1::new(&result.model, c.dynamics, &cfg, c)?;
        *out = Box::into_raw(Box::new(SsModel::new(file)?));
        Ok(())
    })
}

/// Parses a model file's JSON text.
///
/// # Safety
/// `json` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load_json(json: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let file = io::model_from_str(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(SsModel::new(file)?));
        Ok(())
    })
}

/// Canonical model file text. Free the string with [`ss_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_to_json(model: *const SsModel, out: *mut *mut c_char) -> SsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let text = io::model_to_string(&m.file)?;
        *out = CString::new(text)
            .map_err(|_| Failure(SsStatus::DataError, "model text contains NUL".into()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// State dimension the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_state_dim(model: *const SsModel, out: *mut usize) -> SsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = m.model.dim();
        Ok(())
    })
}

/// `h(x)`.
///
/// # Safety
/// `x` must point to `n` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_evaluate(model: *const SsModel, x: *const f64, n: usize, out: *mut f64) -> SsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_arg(out, "out")?;
        *out = m.model.evaluate(slice_arg(x, n, "x")?)?;
        Ok(())
    })
}

/// `∇h(x)` written to `grad`, which must hold `n` doubles.
///
/// # Safety
/// `x` and `grad` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ss_model_gradient(model: *const SsModel, x: *const f64, n: usize, grad: *mut f64) -> SsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let g = m.model.gradient(slice_arg(x, n, "x")?)?;
        if grad.is_null() {
            return Err(null("grad"));
        }
        std::slice::from_raw_parts_mut(grad, n).copy_from_slice(&g);
        Ok(())
    })
}

/// Runs the safety filter at state `x` (length `n`) on the reference
/// control `u_ref` (length `m`) with safety level `tau`. Writes the filtered
/// control to `u_out` (length `m`); `intervened` may be null.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ss_filter(
    model: *const SsModel,
    x: *const f64,
    n: usize,
    u_ref: *const f64,
    m: usize,
    tau: f64,
    u_out: *mut f64,
    intervened: *mut bool,
) -> SsStatus {
    guard(|| {
        let md = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = FilterConfig {
            tolerance_tau: tau,
            ..FilterConfig::default()
        };
        let d = filter(&md.model, &md.dynamics, slice_arg(x, n, "x")?, slice_arg(u_ref, m, "u_ref")?, &cfg)?;
        if u_out.is_null() {
            return Err(null("u_out"));
        }
        ptr::copy_nonoverlapping(d.u_out.as_ptr(), u_out, m);
        if let Some(flag) = intervened.as_mut() {
            *flag = d.intervened;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
