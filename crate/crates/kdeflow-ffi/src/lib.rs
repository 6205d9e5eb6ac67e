//! C ABI for the kdeflow particle solver.
//!
//! The surface is deliberately small: an opaque kernel handle for density
//! evaluation, the closed-form estimation-rate helper, and JSON-in/JSON-out
//! wrappers around experiment runs and schedule admissibility checks. Every
//! entry point returns a [`KdeflowStatus`]; on any non-OK status a
//! human-readable message is parked in thread-local storage and can be
//! collected once with [`kdeflow_last_error`].
//!
//! Ownership rules: strings returned through `*mut *mut c_char` out-params
//! and by [`kdeflow_last_error`] are heap-allocated and must be released with
//! [`kdeflow_string_free`]; kernel handles must be released with
//! [`kdeflow_kernel_free`]. The pointer returned by [`kdeflow_version`] is
//! static and must not be freed.
//!
//! Status mapping follows the CLI exit codes: malformed or rejected input
//! maps to `CONFIG_ERROR` (exit 2), failures during execution map to
//! `RUNTIME_ERROR` (exit 3), and operations that complete but whose check
//! does not pass map to `CHECK_FAILED` (exit 4). `INVALID_ARGUMENT` is
//! reserved for misuse caught at this boundary: null pointers, non-UTF-8
//! text, dimension mismatches, and non-finite scalars.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use kdeflow::harness::{check_schedule_request, run_experiment, RunConfig};
use kdeflow::kde::kde_rate;
use kdeflow::kernel::{Kernel, KernelFamily};
use kdeflow::KdeflowError;

/// Result code shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdeflowStatus {
    /// The call succeeded.
    Ok = 0,
    /// A pointer, encoding, length, or scalar argument was unusable.
    InvalidArgument = 1,
    /// The JSON payload or configuration failed to parse or validate.
    ConfigError = 2,
    /// The operation failed while executing.
    RuntimeError = 3,
    /// The operation ran to completion but its check did not pass.
    CheckFailed = 4,
}

/// Opaque handle to an isotropic density kernel of fixed dimension.
pub struct KdeflowKernel {
    inner: Kernel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    // Interior NULs cannot survive the C boundary; drop them.
    let clean: String = message.chars().filter(|&c| c != '\0').collect();
    let stored = CString::new(clean).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(stored));
}

/// Mirrors the CLI exit-code map for library errors.
fn status_for(err: &KdeflowError) -> KdeflowStatus {
    match err {
        KdeflowError::Config(_) | KdeflowError::Json(_) | KdeflowError::Io(_) => {
            KdeflowStatus::ConfigError
        }
        _ => KdeflowStatus::RuntimeError,
    }
}

fn fail(status: KdeflowStatus, message: &str) -> KdeflowStatus {
    set_last_error(message);
    status
}

fn fail_with(err: &KdeflowError) -> KdeflowStatus {
    set_last_error(&err.to_string());
    status_for(err)
}

/// Runs a body that may touch caller memory, converting panics into a
/// status instead of unwinding across the ABI.
fn guarded<F: FnOnce() -> KdeflowStatus>(body: F) -> KdeflowStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(
            KdeflowStatus::RuntimeError,
            "internal panic; the library state is still usable but the call did nothing",
        ),
    }
}

/// Reads a caller string, rejecting null and non-UTF-8.
///
/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, KdeflowStatus> {
    if ptr.is_null() {
        return Err(fail(
            KdeflowStatus::InvalidArgument,
            &format!("{what}: null pointer"),
        ));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail(
            KdeflowStatus::InvalidArgument,
            &format!("{what}: not valid UTF-8"),
        )
    })
}

fn give_string(text: String, out: *mut *mut c_char) {
    let clean: String = text.chars().filter(|&c| c != '\0').collect();
    let raw = CString::new(clean).unwrap_or_default().into_raw();
    // Caller owns `raw` now; released via kdeflow_string_free.
    unsafe { *out = raw };
}

/// Library version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn kdeflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns and clears the message describing the most recent non-OK status
/// on this thread, or null if there is none. The caller frees the returned
/// string with [`kdeflow_string_free`].
#[no_mangle]
pub extern "C" fn kdeflow_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow_mut().take() {
        Some(msg) => msg.into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library's
/// string-producing functions, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdeflow_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a kernel handle. `family` is one of `"box"`, `"triangular"`,
/// `"epanechnikov"`; `dim` is the ambient dimension (>= 1). On success
/// writes the handle to `out`.
///
/// # Safety
/// `family` must be a NUL-terminated string and `out` a valid location to
/// store one pointer.
#[no_mangle]
pub unsafe extern "C" fn kdeflow_kernel_new(
    family: *const c_char,
    dim: usize,
    out: *mut *mut KdeflowKernel,
) -> KdeflowStatus {
    guarded(|| {
        if out.is_null() {
            return fail(KdeflowStatus::InvalidArgument, "out: null pointer");
        }
        let name = match read_str(family, "family") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let parsed = match name {
            "box" => KernelFamily::Box,
            "triangular" => KernelFamily::Triangular,
            "epanechnikov" => KernelFamily::Epanechnikov,
            other => {
                return fail(
                    KdeflowStatus::ConfigError,
                    &format!("unknown kernel family '{other}'; expected box, triangular, or epanechnikov"),
                )
            }
        };
        match Kernel::new(parsed, dim) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(KdeflowKernel { inner }));
                KdeflowStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Releases a kernel handle. Null is a no-op.
///
/// # Safety
/// `kernel` must be null or a handle from [`kdeflow_kernel_new`], not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn kdeflow_kernel_free(kernel: *mut KdeflowKernel) {
    if !kernel.is_null() {
        drop(Box::from_raw(kernel));
    }
}

/// Evaluates the bandwidth-scaled kernel `h^-d K(x / h)` at the point `x`
/// of length `dim`, which must match the handle's dimension.
///
/// # Safety
/// `kernel` must be a live handle, `x` must point to `dim` doubles, and
/// `out` must be a valid location for one double.
#[no_mangle]
pub unsafe extern "C" fn kdeflow_kernel_eval(
    kernel: *const KdeflowKernel,
    x: *const f64,
    dim: usize,
    bandwidth: f64,
    out: *mut f64,
) -> KdeflowStatus {
    guarded(|| {
        if kernel.is_null() || x.is_null() || out.is_null() {
            return fail(KdeflowStatus::InvalidArgument, "kernel/x/out: null pointer");
        }
        let handle = &*kernel;
        if dim != handle.inner.dim() {
            return fail(
                KdeflowStatus::InvalidArgument,
                &format!(
                    "point has dimension {dim}, kernel has dimension {}",
                    handle.inner.dim()
                ),
            );
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return fail(
                KdeflowStatus::InvalidArgument,
                "bandwidth must be finite and positive",
            );
        }
        let point = std::slice::from_raw_parts(x, dim);
        if point.iter().any(|v| !v.is_finite()) {
            return fail(KdeflowStatus::InvalidArgument, "x: non-finite coordinate");
        }
        *out = handle.inner.eval_scaled(bandwidth, point);
        KdeflowStatus::Ok
    })
}

/// Writes the p-th radial moment of the kernel to `out`; requires `p > 1`.
///
/// # Safety
/// `kernel` must be a live handle and `out` a valid location for one double.
#[no_mangle]
pub unsafe extern "C" fn kdeflow_kernel_moment(
    kernel: *const KdeflowKernel,
    p: f64,
    out: *mut f64,
) -> KdeflowStatus {
    guarded(|| {
        if kernel.is_null() || out.is_null() {
            return fail(KdeflowStatus::InvalidArgument, "kernel/out: null pointer");
        }
        if !(p.is_finite() && p > 1.0) {
            return fail(
                KdeflowStatus::InvalidArgument,
                "p must be finite and exceed 1",
            );
        }
        *out = (*kernel).inner.moment(p);
        KdeflowStatus::Ok
    })
}

/// Writes the closed-form sup-norm estimation rate for `n` samples at
/// bandwidth `h`, confidence level `alpha`, dimension `dim`.
///
/// # Safety
/// `out` must be a valid location for one double.
#[no_mangle]
pub unsafe extern "C" fn kdeflow_rate(
    n: f64,
    h: f64,
    alpha: f64,
    dim: usize,
    out: *mut f64,
) -> KdeflowStatus {
    guarded(|| {
        if out.is_null() {
            return fail(KdeflowStatus::InvalidArgument, "out: null pointer");
        }
        match kde_rate(n, h, alpha, dim) {
            Ok(value) => {
                *out = value;
                KdeflowStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Runs one experiment described by a JSON config document. `out_dir`, if
/// non-null, overrides the config's output directory. On success (and on
/// `CHECK_FAILED`) writes a JSON summary of the artifacts to `out_json`.
/// Returns `CHECK_FAILED` when the run finishes but its mass sanity check
/// fails.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `out_dir` null or a
/// NUL-terminated path, and `out_json` a valid location to store one
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn kdeflow_run_json(
    config_json: *const c_char,
    out_dir: *const c_char,
    out_json: *mut *mut c_char,
) -> KdeflowStatus {
    guarded(|| {
        if out_json.is_null() {
            return fail(KdeflowStatus::InvalidArgument, "out_json: null pointer");
        }
        let raw = match read_str(config_json, "config_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let config: RunConfig = match serde_json::from_str(raw) {
            Ok(c) => c,
            Err(e) => return fail(KdeflowStatus::ConfigError, &format!("config: {e}")),
        };
        let override_dir = if out_dir.is_null() {
            None
        } else {
            match read_str(out_dir, "out_dir") {
                Ok(s) => Some(PathBuf::from(s)),
                Err(status) => return status,
            }
        };
        match run_experiment(&config, override_dir.as_deref()) {
            Ok(artifacts) => {
                let summary = serde_json::to_string(&artifacts)
                    .unwrap_or_else(|e| format!("{{\"serialization_error\":\"{e}\"}}"));
                give_string(summary, out_json);
                if artifacts.sane {
                    KdeflowStatus::Ok
                } else {
                    fail(
                        KdeflowStatus::CheckFailed,
                        "run completed but the mixture mass sanity check failed",
                    )
                }
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Checks schedule admissibility from a JSON request document and writes
/// the full JSON report to `out_json` whenever the check runs. Returns
/// `CHECK_FAILED` when the report verdict is negative.
///
/// # Safety
/// `request_json` must be a NUL-terminated string and `out_json` a valid
/// location to store one pointer.
#[no_mangle]
pub unsafe extern "C" fn kdeflow_check_schedule_json(
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> KdeflowStatus {
    guarded(|| {
        if out_json.is_null() {
            return fail(KdeflowStatus::InvalidArgument, "out_json: null pointer");
        }
        let raw = match read_str(request_json, "request_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match check_schedule_request(raw) {
            Ok(report) => {
                let text = serde_json::to_string_pretty(&report)
                    .unwrap_or_else(|e| format!("{{\"serialization_error\":\"{e}\"}}"));
                give_string(text, out_json);
                if report.pass {
                    KdeflowStatus::Ok
                } else {
                    fail(
                        KdeflowStatus::CheckFailed,
                        "schedule fails at least one admissibility condition",
                    )
                }
            }
            Err(e) => fail_with(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_map_tracks_error_categories() {
        let config = KdeflowError::Config("x".into());
        assert_eq!(status_for(&config), KdeflowStatus::ConfigError);
        let runtime = KdeflowError::OracleBudget {
            candidates: 10.0,
            max: 1.0,
        };
        assert_eq!(status_for(&runtime), KdeflowStatus::RuntimeError);
    }

    #[test]
    fn last_error_is_take_once() {
        set_last_error("boom");
        let first = kdeflow_last_error();
        assert!(!first.is_null());
        unsafe { kdeflow_string_free(first) };
        assert!(kdeflow_last_error().is_null());
    }

    #[test]
    fn interior_nuls_are_stripped_from_messages() {
        set_last_error("a\0b");
        let ptr = kdeflow_last_error();
        let text = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_owned();
        unsafe { kdeflow_string_free(ptr) };
        assert_eq!(text, "ab");
    }
}
