//! C interface to the patch-ep restoration library.
//!
//! Fallible calls return a [`PepStatus`]. After a failure, [`pep_last_error`] gives a
//! message for the calling thread. Handles are opaque and are released with the matching
//! `*_free` function; passing null to a `*_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use patch_ep::config::apply_override;
use patch_ep::forward::{DegradationOperator, Kernel, NoiseModel};
use patch_ep::gmm::{load_gmm, PatchGmm};
use patch_ep::metrics::{coverage, psnr};
use patch_ep::pipeline::{run_pipeline, PipelineConfig, PipelineOutput, Problem};
use patch_ep::Error;
use serde_json::{Map, Value};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PepStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// A matrix that must be positive definite was not.
    Numerical = 4,
    /// A bug or a caught panic.
    Internal = 5,
}

/// Observation noise for [`pep_restore`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PepNoise {
    /// Additive Gaussian noise; `variance` must be positive.
    Gaussian = 0,
    /// Poisson counts; `variance` is ignored.
    Poisson = 1,
}

/// Trained patch mixture.
pub struct PepGmm(PatchGmm);

/// Pipeline configuration kept as JSON so dotted overrides can be applied.
pub struct PepConfig {
    root: Value,
    parsed: PipelineConfig,
}

/// Degradation operator on a fixed image size.
pub struct PepOperator(DegradationOperator);

/// Output of a restoration run.
pub struct PepResult {
    output: PipelineOutput,
    report: CString,
}

struct Failure {
    status: PepStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => PepStatus::Io,
            Error::NotPositiveDefinite(_) => PepStatus::Numerical,
            Error::IndexOutOfRange { .. } => PepStatus::Internal,
            _ => PepStatus::InvalidArgument,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn null(what: &str) -> Failure {
    Failure {
        status: PepStatus::NullPointer,
        message: format!("{what} is null"),
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        status: PepStatus::InvalidArgument,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, records any failure for [`pep_last_error`] and converts panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PepStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let message = panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".to_string());
        Err(Failure {
            status: PepStatus::Internal,
            message: format!("internal error: {message}"),
        })
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PepStatus::Ok
        }
        Err(f) => {
            set_last_error(&f.message);
            f.status
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn values<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn values_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pep_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
///
/// The pointer stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn pep_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string obtained from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn pep_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a mixture written by `patch-ep train-gmm`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_gmm_load(path: *const c_char, out: *mut *mut PepGmm) -> PepStatus {
    guard(|| {
        let g = load_gmm(text(path, "path")?)?;
        emit(out, PepGmm(g))
    })
}

/// Number of mixture components, or 0 for null.
///
/// # Safety
/// `gmm` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pep_gmm_components(gmm: *const PepGmm) -> usize {
    gmm.as_ref().map_or(0, |g| g.0.k())
}

/// Patch dimension (side squared), or 0 for null.
///
/// # Safety
/// `gmm` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pep_gmm_dim(gmm: *const PepGmm) -> usize {
    gmm.as_ref().map_or(0, |g| g.0.dim())
}

/// # Safety
/// `gmm` must be null or a handle that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn pep_gmm_free(gmm: *mut PepGmm) {
    release(gmm)
}

fn parse_config(root: Value) -> Result<PepConfig, Failure> {
    let parsed: PipelineConfig = serde_json::from_value(root.clone())?;
    parsed.validate()?;
    Ok(PepConfig { root, parsed })
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_config_new(out: *mut *mut PepConfig) -> PepStatus {
    guard(|| emit(out, parse_config(Value::Object(Map::new()))?))
}

/// Configuration from a JSON object; missing keys take their defaults.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_config_from_json(json: *const c_char, out: *mut *mut PepConfig) -> PepStatus {
    guard(|| {
        let root: Value = serde_json::from_str(text(json, "json")?)?;
        emit(out, parse_config(root)?)
    })
}

/// Applies a dotted `key=value` override such as `ep.damping=0.5`.
///
/// The configuration is unchanged when the result would be invalid.
///
/// # Safety
/// `config` must be a live handle and `assignment` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pep_config_set(config: *mut PepConfig, assignment: *const c_char) -> PepStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        let mut root = cfg.root.clone();
        apply_override(&mut root, text(assignment, "assignment")?)?;
        *cfg = parse_config(root)?;
        Ok(())
    })
}

/// Effective configuration as JSON; release with [`pep_string_free`]. Null on failure.
///
/// # Safety
/// `config` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pep_config_to_json(config: *const PepConfig) -> *mut c_char {
    let mut out = ptr::null_mut();
    guard(|| {
        let json = serde_json::to_string(&handle(config, "config")?.parsed)?;
        out = CString::new(json).map_err(|_| invalid("configuration contains a nul byte"))?.into_raw();
        Ok(())
    });
    out
}

/// # Safety
/// `config` must be null or a handle that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn pep_config_free(config: *mut PepConfig) {
    release(config)
}

/// Identity operator (denoising).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_operator_identity(width: usize, height: usize, out: *mut *mut PepOperator) -> PepStatus {
    guard(|| {
        if width == 0 || height == 0 {
            return Err(invalid("image size must be positive"));
        }
        emit(out, PepOperator(DegradationOperator::identity(width, height)))
    })
}

/// Pixel mask (inpainting); nonzero entries of `kept` are observed. `kept` holds `width·height` bytes.
///
/// # Safety
/// `kept` must point to `width·height` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_operator_mask(
    width: usize,
    height: usize,
    kept: *const u8,
    out: *mut *mut PepOperator,
) -> PepStatus {
    guard(|| {
        let n = width.checked_mul(height).ok_or_else(|| invalid("image size overflows"))?;
        let kept = values(kept, n, "kept")?.iter().map(|&b| b != 0).collect();
        emit(out, PepOperator(DegradationOperator::mask(width, height, kept)?))
    })
}

/// Periodic convolution with a row-major `size × size` kernel (blur, deconvolution).
///
/// # Safety
/// `kernel` must point to `size·size` readable values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_operator_convolution(
    width: usize,
    height: usize,
    kernel: *const f64,
    size: usize,
    out: *mut *mut PepOperator,
) -> PepStatus {
    guard(|| {
        let len = size.checked_mul(size).ok_or_else(|| invalid("kernel size overflows"))?;
        let k = Kernel::new(size, values(kernel, len, "kernel")?.to_vec())?;
        emit(out, PepOperator(DegradationOperator::conv2d(width, height, k)?))
    })
}

/// Writes `H x` into `out`; both buffers hold `len` values, which must equal the pixel count.
///
/// # Safety
/// `op` must be a live handle and `x`, `out` point to `len` values each.
#[no_mangle]
pub unsafe extern "C" fn pep_operator_apply(op: *const PepOperator, x: *const f64, out: *mut f64, len: usize) -> PepStatus {
    guard(|| {
        let op = handle(op, "operator")?;
        let hx = op.0.apply(values(x, len, "x")?)?;
        values_mut(out, len, "out")?.copy_from_slice(&hx);
        Ok(())
    })
}

/// # Safety
/// `op` must be null or a handle that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn pep_operator_free(op: *mut PepOperator) {
    release(op)
}

/// Restores `y` (`len` pixels, row-major) and returns the fused posterior and report.
///
/// # Safety
/// Handles must be live, `y` must point to `len` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_restore(
    gmm: *const PepGmm,
    config: *const PepConfig,
    op: *const PepOperator,
    noise: PepNoise,
    variance: f64,
    y: *const f64,
    len: usize,
    out: *mut *mut PepResult,
) -> PepStatus {
    guard(|| {
        let gmm = handle(gmm, "gmm")?;
        let cfg = handle(config, "config")?;
        let op = handle(op, "operator")?;
        let noise = match noise {
            PepNoise::Gaussian => NoiseModel::Gaussian { variance },
            PepNoise::Poisson => NoiseModel::Poisson,
        };
        let problem = Problem {
            y: values(y, len, "y")?,
            op: &op.0,
            noise,
            base: &gmm.0,
        };
        let output = run_pipeline(&problem, &cfg.parsed)?;
        let report = CString::new(serde_json::to_string(&output.report)?).map_err(|_| invalid("report contains a nul byte"))?;
        emit(out, PepResult { output, report })
    })
}

/// Number of pixels in the result, or 0 for null.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pep_result_len(result: *const PepResult) -> usize {
    result.as_ref().map_or(0, |r| r.output.fused.mean.len())
}

/// Number of fused experts, or 0 for null.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pep_result_experts(result: *const PepResult) -> usize {
    result.as_ref().map_or(0, |r| r.output.experts.len())
}

/// Copies the posterior mean into `out`, which holds exactly [`pep_result_len`] values.
///
/// # Safety
/// `result` must be a live handle and `out` point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pep_result_mean(result: *const PepResult, out: *mut f64, len: usize) -> PepStatus {
    guard(|| copy_out(&handle(result, "result")?.output.fused.mean, out, len))
}

/// Copies the marginal posterior variances into `out`, which holds exactly [`pep_result_len`] values.
///
/// # Safety
/// `result` must be a live handle and `out` point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pep_result_variance(result: *const PepResult, out: *mut f64, len: usize) -> PepStatus {
    guard(|| copy_out(&handle(result, "result")?.output.fused.variances, out, len))
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if len != src.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            got: len,
        }
        .into());
    }
    values_mut(out, len, "out")?.copy_from_slice(src);
    Ok(())
}

/// Run report as JSON, owned by `result`; null for a null handle.
///
/// # Safety
/// `result` must be null or a live handle. The string is valid until the result is freed.
#[no_mangle]
pub unsafe extern "C" fn pep_result_report(result: *const PepResult) -> *const c_char {
    result.as_ref().map_or(ptr::null(), |r| r.report.as_ptr())
}

/// # Safety
/// `result` must be null or a handle that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn pep_result_free(result: *mut PepResult) {
    release(result)
}

/// Peak signal-to-noise ratio in dB with the reference's maximum as peak; infinite for identical inputs.
///
/// # Safety
/// `reference` and `estimate` must point to `len` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_psnr(reference: *const f64, estimate: *const f64, len: usize, out: *mut f64) -> PepStatus {
    guard(|| {
        let p = psnr(values(reference, len, "reference")?, values(estimate, len, "estimate")?)?;
        *values_mut(out, 1, "out")?.first_mut().expect("one slot") = p;
        Ok(())
    })
}

/// Fraction of pixels whose reference lies in the central `level` interval of `N(mean, variance)`.
///
/// # Safety
/// The three arrays must hold `len` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_coverage(
    reference: *const f64,
    mean: *const f64,
    variance: *const f64,
    len: usize,
    level: f64,
    out: *mut f64,
) -> PepStatus {
    guard(|| {
        let c = coverage(
            values(reference, len, "reference")?,
            values(mean, len, "mean")?,
            values(variance, len, "variance")?,
            level,
        )?;
        *values_mut(out, 1, "out")?.first_mut().expect("one slot") = c.fraction_inside;
        Ok(())
    })
}
