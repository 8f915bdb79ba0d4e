//! C ABI for the qalloc simulator.
//!
//! Every entry point returns a [`QallocStatus`]. On failure the message is
//! available from [`qalloc_last_error`] on the same thread until the next
//! call. Handles are opaque and must be released with their `_free`
//! function; strings returned by the library go back through
//! [`qalloc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use qalloc::analysis;
use qalloc::{engine, Error, NodeInit, RunResult, Scenario, SimConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QallocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Unparseable config or unknown keys.
    Config = 3,
    /// A model assumption does not hold.
    Validation = 4,
    OutOfRange = 5,
    /// The simulation itself failed.
    Runtime = 6,
    Panic = 7,
}

pub struct QallocScenario {
    inner: Scenario,
}

pub struct QallocRun {
    inner: RunResult,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QallocNodeFinal {
    pub q_s: i64,
    /// Valid only when `terminated` is true.
    pub w_star: i64,
    pub terminated: bool,
    pub y_alpha: i64,
    pub z_alpha: i64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_for(e: &Error) -> QallocStatus {
    match e {
        Error::Toml(_) | Error::Config(_) => QallocStatus::Config,
        Error::Validation(_) | Error::Graph(_) => QallocStatus::Validation,
        Error::Analysis(_) | Error::Adversary(_) => QallocStatus::OutOfRange,
        _ => QallocStatus::Runtime,
    }
}

fn guard<F: FnOnce() -> Result<(), (QallocStatus, String)>>(f: F) -> QallocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            QallocStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            QallocStatus::Panic
        }
    }
}

fn fail(e: Error) -> (QallocStatus, String) {
    (status_for(&e), e.to_string())
}

fn null(what: &str) -> (QallocStatus, String) {
    (QallocStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (QallocStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (QallocStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn qalloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses and validates a TOML config, drawing the graph and node inputs.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qalloc_scenario_from_toml(toml: *const c_char, out: *mut *mut QallocScenario) -> QallocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(toml, "toml")?;
        let cfg = SimConfig::from_toml_str(text).map_err(fail)?;
        let inner = cfg.resolve().map_err(fail)?;
        *out = Box::into_raw(Box::new(QallocScenario { inner }));
        Ok(())
    })
}

/// # Safety
/// `scenario` must come from [`qalloc_scenario_from_toml`] or be null.
#[no_mangle]
pub unsafe extern "C" fn qalloc_scenario_free(scenario: *mut QallocScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// `scenario` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn qalloc_scenario_node_count(scenario: *const QallocScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.inner.n())
}

/// Replaces the routing seed; the graph and inputs stay as drawn.
///
/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qalloc_scenario_set_seed(scenario: *mut QallocScenario, seed: u64) -> QallocStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| null("scenario"))?;
        s.inner.seed = seed;
        Ok(())
    })
}

/// Runs the scenario to termination or the iteration cap.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qalloc_run(scenario: *const QallocScenario, out: *mut *mut QallocRun) -> QallocStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = engine::run(&s.inner).map_err(fail)?;
        *out = Box::into_raw(Box::new(QallocRun { inner }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`qalloc_run`] or be null.
#[no_mangle]
pub unsafe extern "C" fn qalloc_run_free(run: *mut QallocRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Termination round, or 0 if the cap was reached first.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn qalloc_run_k_end(run: *const QallocRun) -> u64 {
    run.as_ref().and_then(|r| r.inner.k_end).unwrap_or(0)
}

/// Exact global ratio of the run as a reduced fraction.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qalloc_run_ratio(run: *const QallocRun, numerator: *mut i64, denominator: *mut i64) -> QallocStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if numerator.is_null() || denominator.is_null() {
            return Err(null("output"));
        }
        *numerator = r.inner.ratio.numerator;
        *denominator = r.inner.ratio.denominator;
        Ok(())
    })
}

/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qalloc_run_final(run: *const QallocRun, node: usize, out: *mut QallocNodeFinal) -> QallocStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let f = r
            .inner
            .finals
            .get(node)
            .ok_or_else(|| (QallocStatus::OutOfRange, format!("node {node} out of range")))?;
        *out = QallocNodeFinal {
            q_s: f.q_s,
            w_star: f.w_star.unwrap_or(0),
            terminated: f.w_star.is_some(),
            y_alpha: f.y_alpha,
            z_alpha: f.z_alpha,
        };
        Ok(())
    })
}

/// Event log as JSON lines. Free the string with [`qalloc_string_free`].
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qalloc_run_events_jsonl(run: *const QallocRun, out: *mut *mut c_char) -> QallocStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut buf = Vec::new();
        r.inner.write_events_jsonl(&mut buf).map_err(fail)?;
        *out = CString::new(buf).map_err(|_| (QallocStatus::Runtime, "event log contains NUL".to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn qalloc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Total tests over total infections for `n` nodes, reduced.
///
/// # Safety
/// `tests` and `infections` must point to `n` values; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn qalloc_global_ratio(
    tests: *const i64,
    infections: *const i64,
    n: usize,
    numerator: *mut i64,
    denominator: *mut i64,
) -> QallocStatus {
    guard(|| {
        if tests.is_null() || infections.is_null() || numerator.is_null() || denominator.is_null() {
            return Err(null("argument"));
        }
        let (t, c) = (std::slice::from_raw_parts(tests, n), std::slice::from_raw_parts(infections, n));
        let inits: Vec<NodeInit> = t.iter().zip(c).map(|(&t, &c)| NodeInit::neutral(t, c)).collect();
        let q = analysis::global_ratio(&inits).map_err(|e| fail(e.into()))?;
        *numerator = q.numerator;
        *denominator = q.denominator;
        Ok(())
    })
}

/// Windows needed for a walk to reach every node with probability `1 - eps`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qalloc_tau(eps: f64, max_out_degree: usize, n: usize, out: *mut u64) -> QallocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = analysis::tau(eps, max_out_degree, n).map_err(|e| fail(e.into()))?;
        Ok(())
    })
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn qalloc_version() -> *const c_char {
    static VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    VERSION.as_ptr().cast()
}
