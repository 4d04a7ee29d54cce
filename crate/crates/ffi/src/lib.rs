//! C ABI for the simulator.
//!
//! Configurations, traces and finished runs cross the boundary as opaque
//! pointers owned by the caller and released with the matching `*_free`.
//! Fallible calls return an [`LpStatus`]; on failure the message is kept
//! per thread and read back with [`lp_last_error`]. Strings returned by the
//! library are freed with [`lp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lazypim::engine::{build_report, run, RunOutput};
use lazypim::metrics::Report;
use lazypim::workload::{generate, parse_trace, read_trace_file, Trace};
use lazypim::{Error, SimConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Parse = 4,
    Trace = 5,
    Param = 6,
    Io = 7,
    Simulation = 8,
    Panic = 9,
}

/// Simulator configuration.
pub struct LpConfig(SimConfig);

/// Parsed or generated memory trace.
pub struct LpTrace(Trace);

/// A finished simulation: metrics, final memory and the JSON report.
pub struct LpRun {
    output: RunOutput,
    report: Report,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> LpStatus {
    match err {
        Error::Config(_) => LpStatus::Config,
        Error::Parse { .. } => LpStatus::Parse,
        Error::Trace(_) => LpStatus::Trace,
        Error::Param(_) | Error::Capacity { .. } => LpStatus::Param,
        Error::Io { .. } => LpStatus::Io,
        _ => LpStatus::Simulation,
    }
}

struct Failure(LpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Run `f`, turning errors and panics into a status plus stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            LpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(LpStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(LpStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn lp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn lp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration. Never null.
#[no_mangle]
pub extern "C" fn lp_config_default() -> *mut LpConfig {
    Box::into_raw(Box::new(LpConfig(SimConfig::default())))
}

/// Parse a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_config_from_toml(toml: *const c_char, out: *mut *mut LpConfig) -> LpStatus {
    guard(|| {
        let cfg = SimConfig::from_toml_str(text(toml, "toml")?)?;
        put(out, LpConfig(cfg))
    })
}

/// Load a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_config_load(path: *const c_char, out: *mut *mut LpConfig) -> LpStatus {
    guard(|| {
        let cfg = SimConfig::load(Path::new(text(path, "path")?))?;
        put(out, LpConfig(cfg))
    })
}

/// Apply one `key.path=value` override in place. On failure the
/// configuration is unchanged.
///
/// # Safety
/// `cfg` must be a live configuration and `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lp_config_set(cfg: *mut LpConfig, assignment: *const c_char) -> LpStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let a = text(assignment, "assignment")?;
        cfg.0 = cfg.0.with_overrides(&[a.to_string()])?;
        Ok(())
    })
}

/// Serialize a configuration to TOML. Free with `lp_string_free`; null if
/// `cfg` is null.
///
/// # Safety
/// `cfg` must be null or a live configuration.
#[no_mangle]
pub unsafe extern "C" fn lp_config_to_toml(cfg: *const LpConfig) -> *mut c_char {
    match cfg.as_ref() {
        Some(c) => owned_string(c.0.to_toml_string()),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `cfg` must be null or a configuration not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_config_free(cfg: *mut LpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Parse a trace in the text format.
///
/// # Safety
/// `trace_text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_trace_parse(trace_text: *const c_char, out: *mut *mut LpTrace) -> LpStatus {
    guard(|| {
        let t = parse_trace(text(trace_text, "trace text")?)?;
        put(out, LpTrace(t))
    })
}

/// Load a text or binary trace file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_trace_load(path: *const c_char, out: *mut *mut LpTrace) -> LpStatus {
    guard(|| {
        let t = read_trace_file(Path::new(text(path, "path")?))?;
        put(out, LpTrace(t))
    })
}

/// Generate the trace described by the configuration's `[workload]` table.
///
/// # Safety
/// `cfg` must be a live configuration and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_trace_generate(cfg: *const LpConfig, out: *mut *mut LpTrace) -> LpStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        let spec = cfg.0.workload.as_ref().ok_or_else(|| Failure(LpStatus::Config, "config has no [workload] table".into()))?;
        put(out, LpTrace(generate(spec)?))
    })
}

/// Event count of a trace; 0 for null.
///
/// # Safety
/// `trace` must be null or a live trace.
#[no_mangle]
pub unsafe extern "C" fn lp_trace_len(trace: *const LpTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `trace` must be null or a trace not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_trace_free(trace: *mut LpTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Simulate `trace` under `cfg`.
///
/// # Safety
/// `cfg` and `trace` must be live objects and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_run(cfg: *const LpConfig, trace: *const LpTrace, out: *mut *mut LpRun) -> LpStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or_else(|| null("config"))?.0;
        let trace = &trace.as_ref().ok_or_else(|| null("trace"))?.0;
        let output = run(cfg, trace)?;
        let report = build_report(cfg.protocol.name(), cfg, trace, output.metrics.clone())?;
        put(out, LpRun { output, report })
    })
}

/// Total simulated cycles; 0 for null.
///
/// # Safety
/// `r` must be null or a live run.
#[no_mangle]
pub unsafe extern "C" fn lp_run_total_cycles(r: *const LpRun) -> u64 {
    r.as_ref().map_or(0, |r| r.output.metrics.total_cycles)
}

/// Off-chip bytes over all traffic categories; 0 for null.
///
/// # Safety
/// `r` must be null or a live run.
#[no_mangle]
pub unsafe extern "C" fn lp_run_offchip_bytes(r: *const LpRun) -> u64 {
    r.as_ref().map_or(0, |r| r.output.metrics.offchip_bytes())
}

/// Commit attempts that ended in a conflict; 0 for null.
///
/// # Safety
/// `r` must be null or a live run.
#[no_mangle]
pub unsafe extern "C" fn lp_run_conflicts(r: *const LpRun) -> u64 {
    r.as_ref().map_or(0, |r| r.output.metrics.counters.conflicts)
}

/// Read one 8-byte word of the final memory image.
///
/// # Safety
/// `r` must be a live run and `value` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_run_read_word(r: *const LpRun, addr: u64, value: *mut u64) -> LpStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("run"))?;
        let value = value.as_mut().ok_or_else(|| null("output pointer"))?;
        *value = r.output.final_memory.read_word(addr);
        Ok(())
    })
}

/// The run's report as JSON. Free with `lp_string_free`; null if `r` is null.
///
/// # Safety
/// `r` must be null or a live run.
#[no_mangle]
pub unsafe extern "C" fn lp_run_report_json(r: *const LpRun) -> *mut c_char {
    match r.as_ref() {
        Some(r) => owned_string(serde_json::to_string_pretty(&r.report).expect("report serializes")),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `r` must be null or a run not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_run_free(r: *mut LpRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failures_set_and_success_clears_the_message() {
        let mut cfg = ptr::null_mut();
        let bad = CString::new("bogus = 1").unwrap();
        assert_eq!(unsafe { lp_config_from_toml(bad.as_ptr(), &mut cfg) }, LpStatus::Config);
        assert!(cfg.is_null());
        assert!(!lp_last_error().is_null());
        let good = CString::new("").unwrap();
        assert_eq!(unsafe { lp_config_from_toml(good.as_ptr(), &mut cfg) }, LpStatus::Ok);
        assert!(lp_last_error().is_null());
        unsafe { lp_config_free(cfg) };
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut t = ptr::null_mut();
        assert_eq!(unsafe { lp_trace_parse(ptr::null(), &mut t) }, LpStatus::NullArgument);
        assert_eq!(unsafe { lp_run(ptr::null(), ptr::null(), ptr::null_mut()) }, LpStatus::NullArgument);
        assert_eq!(unsafe { lp_run_total_cycles(ptr::null()) }, 0);
    }
}
