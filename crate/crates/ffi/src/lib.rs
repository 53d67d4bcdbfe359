//! C ABI over the simulator.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns a
//! [`RapidsimStatus`]; on failure [`rapidsim_last_error`] describes the
//! problem. Strings handed out by the library are NUL-terminated UTF-8 and
//! must be released with [`rapidsim_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rapidsim::config::{parse_specs, ConfigError, Mode, Specs};
use rapidsim::orchestrator::{self, RunError, RunResult};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RapidsimStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// An input string was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A document failed to parse or validate.
    Config = 3,
    /// The configuration does not fit in device memory.
    Infeasible = 4,
    /// Routing, trace or simulation failure.
    Simulation = 5,
    /// An argument value is out of range.
    InvalidArgument = 6,
    /// The library panicked; the handle involved should be discarded.
    Internal = 7,
}

pub const RAPIDSIM_MODE_FROM_RUN: u32 = 0;
pub const RAPIDSIM_MODE_FLATTENED: u32 = 1;
pub const RAPIDSIM_MODE_HIERARCHICAL: u32 = 2;

/// Parsed and validated model, hardware and run documents.
pub struct RapidsimSpecs {
    inner: Specs,
}

/// Outcome of a single simulated run.
pub struct RapidsimResult {
    inner: RunResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn fail(status: RapidsimStatus, msg: impl Into<String>) -> RapidsimStatus {
    set_error(msg);
    status
}

fn config_error(e: ConfigError) -> RapidsimStatus {
    fail(RapidsimStatus::Config, e.to_string())
}

fn run_error(e: RunError) -> RapidsimStatus {
    let status = match &e {
        RunError::Config(_) | RunError::Graph(_) => RapidsimStatus::Config,
        RunError::Infeasible(_) => RapidsimStatus::Infeasible,
        RunError::Trace(_) | RunError::Sim(_) | RunError::Topology(_) => RapidsimStatus::Simulation,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> RapidsimStatus) -> RapidsimStatus {
    set_error("");
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        fail(RapidsimStatus::Internal, msg)
    })
}

/// # Safety
/// `p` must be NULL or point to a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, RapidsimStatus> {
    if p.is_null() {
        return Err(fail(RapidsimStatus::NullArgument, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(RapidsimStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn give_string(s: String, out: *mut *mut c_char) -> RapidsimStatus {
    match CString::new(s) {
        Ok(c) => {
            // SAFETY: callers check `out` for NULL before producing output.
            unsafe { *out = c.into_raw() };
            RapidsimStatus::Ok
        }
        Err(e) => fail(RapidsimStatus::Internal, e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T, out: *mut *mut c_char) -> RapidsimStatus {
    match serde_json::to_string(v) {
        Ok(s) => give_string(s, out),
        Err(e) => fail(RapidsimStatus::Internal, e.to_string()),
    }
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn rapidsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rapidsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse the three JSON documents into a specs handle.
///
/// # Safety
/// The document pointers must be NULL or NUL-terminated strings; `out`
/// must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_specs_parse(
    model_json: *const c_char,
    hardware_json: *const c_char,
    run_json: *const c_char,
    out: *mut *mut RapidsimSpecs,
) -> RapidsimStatus {
    guard(|| {
        if out.is_null() {
            return fail(RapidsimStatus::NullArgument, "out is NULL");
        }
        *out = ptr::null_mut();
        let docs = (|| Ok((str_arg(model_json, "model")?, str_arg(hardware_json, "hardware")?, str_arg(run_json, "run")?)))();
        let (m, h, r) = match docs {
            Ok(d) => d,
            Err(s) => return s,
        };
        match parse_specs(m, h, r) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(RapidsimSpecs { inner }));
                RapidsimStatus::Ok
            }
            Err(e) => config_error(e),
        }
    })
}

/// # Safety
/// `specs` must be NULL or a handle from [`rapidsim_specs_parse`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_specs_free(specs: *mut RapidsimSpecs) {
    if !specs.is_null() {
        drop(Box::from_raw(specs));
    }
}

/// Replace the run seed (and the fault generator's seed, if any).
///
/// # Safety
/// `specs` must be NULL or a live specs handle.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_specs_set_seed(specs: *mut RapidsimSpecs, seed: u64) -> RapidsimStatus {
    guard(|| match specs.as_mut() {
        Some(s) => {
            s.inner = s.inner.clone().with_seed(Some(seed));
            RapidsimStatus::Ok
        }
        None => fail(RapidsimStatus::NullArgument, "specs is NULL"),
    })
}

/// Number of GPUs described by the topology.
///
/// # Safety
/// `specs` must be NULL or a live specs handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_specs_num_gpus(specs: *const RapidsimSpecs, out: *mut u64) -> RapidsimStatus {
    guard(|| match (specs.as_ref(), out.as_mut()) {
        (Some(s), Some(o)) => {
            *o = s.inner.topology.num_gpus();
            RapidsimStatus::Ok
        }
        _ => fail(RapidsimStatus::NullArgument, "specs or out is NULL"),
    })
}

/// Simulate one run. `mode` is one of the `RAPIDSIM_MODE_*` constants.
///
/// # Safety
/// `specs` must be NULL or a live specs handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_run(specs: *const RapidsimSpecs, mode: u32, out: *mut *mut RapidsimResult) -> RapidsimStatus {
    guard(|| {
        if out.is_null() {
            return fail(RapidsimStatus::NullArgument, "out is NULL");
        }
        *out = ptr::null_mut();
        let Some(s) = specs.as_ref() else {
            return fail(RapidsimStatus::NullArgument, "specs is NULL");
        };
        let mut specs = s.inner.clone();
        specs.run.mode = match mode {
            RAPIDSIM_MODE_FROM_RUN => specs.run.mode,
            RAPIDSIM_MODE_FLATTENED => Mode::Flattened,
            RAPIDSIM_MODE_HIERARCHICAL => Mode::Hierarchical,
            m => return fail(RapidsimStatus::InvalidArgument, format!("unknown mode {m}")),
        };
        match orchestrator::run(&specs, false) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(RapidsimResult { inner }));
                RapidsimStatus::Ok
            }
            Err(e) => run_error(e),
        }
    })
}

/// # Safety
/// `result` must be NULL or a handle from [`rapidsim_run`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_result_free(result: *mut RapidsimResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Predicted end-to-end time in seconds.
///
/// # Safety
/// `result` must be NULL or a live result handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_result_total_time(result: *const RapidsimResult, out: *mut f64) -> RapidsimStatus {
    guard(|| match (result.as_ref(), out.as_mut()) {
        (Some(r), Some(o)) => {
            *o = r.inner.total_time;
            RapidsimStatus::Ok
        }
        _ => fail(RapidsimStatus::NullArgument, "result or out is NULL"),
    })
}

/// Per-GPU memory footprint in bytes.
///
/// # Safety
/// `result` must be NULL or a live result handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_result_memory_bytes(result: *const RapidsimResult, out: *mut u64) -> RapidsimStatus {
    guard(|| match (result.as_ref(), out.as_mut()) {
        (Some(r), Some(o)) => {
            *o = r.inner.memory.total_bytes;
            RapidsimStatus::Ok
        }
        _ => fail(RapidsimStatus::NullArgument, "result or out is NULL"),
    })
}

/// Full result as a JSON document. Release with [`rapidsim_string_free`].
///
/// # Safety
/// `result` must be NULL or a live result handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_result_json(result: *const RapidsimResult, out: *mut *mut c_char) -> RapidsimStatus {
    guard(|| {
        if out.is_null() {
            return fail(RapidsimStatus::NullArgument, "out is NULL");
        }
        *out = ptr::null_mut();
        match result.as_ref() {
            Some(r) => json(&r.inner, out),
            None => fail(RapidsimStatus::NullArgument, "result is NULL"),
        }
    })
}

/// Sweep the run document's grid; rows as a JSON array. Release with
/// [`rapidsim_string_free`].
///
/// # Safety
/// `specs` must be NULL or a live specs handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_sweep_json(specs: *const RapidsimSpecs, out: *mut *mut c_char) -> RapidsimStatus {
    guard(|| {
        if out.is_null() {
            return fail(RapidsimStatus::NullArgument, "out is NULL");
        }
        *out = ptr::null_mut();
        match specs.as_ref() {
            Some(s) => json(&orchestrator::sweep(&s.inner), out),
            None => fail(RapidsimStatus::NullArgument, "specs is NULL"),
        }
    })
}

/// Single-link fault Monte Carlo with `iterations` samples (0 keeps the
/// run document's count). Release the JSON with [`rapidsim_string_free`].
///
/// # Safety
/// `specs` must be NULL or a live specs handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_faults_json(
    specs: *const RapidsimSpecs,
    iterations: u64,
    out: *mut *mut c_char,
) -> RapidsimStatus {
    guard(|| {
        if out.is_null() {
            return fail(RapidsimStatus::NullArgument, "out is NULL");
        }
        *out = ptr::null_mut();
        let Some(s) = specs.as_ref() else {
            return fail(RapidsimStatus::NullArgument, "specs is NULL");
        };
        let mut mc = s.inner.run.monte_carlo.clone();
        if iterations > 0 {
            mc.iterations = iterations;
        }
        match orchestrator::fault_monte_carlo(&s.inner, &mc, s.inner.run.rng_seed) {
            Ok(r) => json(&r, out),
            Err(e) => run_error(e),
        }
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library that has not been
/// freed.
#[no_mangle]
pub unsafe extern "C" fn rapidsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
