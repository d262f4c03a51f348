//! C ABI over the fmrg library.
//!
//! Conventions: opaque handles with explicit free functions, integer status
//! codes (0 success; see `include/fmrg.h`), output through out-pointers, and
//! a thread-local last-error message. Strings returned through out-pointers
//! are NUL-terminated and owned by the caller; release them with
//! [`fmrg_string_free`]. Every entry point catches panics and reports them
//! as `FMRG_ERR_PANIC` instead of unwinding across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fmrg::config::ExperimentConfig;
use fmrg::experiment::{
    early_stop_study, lambda_sweep, run_ensemble, summaries_to_csv, toy_inverse_problem,
    verify_suite, EnsembleSummary,
};
use fmrg::{theory, Error};

pub const FMRG_OK: c_int = 0;
pub const FMRG_ERR_ARGUMENT: c_int = 1;
pub const FMRG_ERR_CONFIG: c_int = 2;
pub const FMRG_ERR_NUMERICS: c_int = 3;
pub const FMRG_ERR_VERIFY: c_int = 4;
pub const FMRG_ERR_PANIC: c_int = 5;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn store_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn code_of(e: &Error) -> c_int {
    e.exit_code() as c_int
}

fn fail(e: Error) -> c_int {
    let code = code_of(&e);
    store_error(e.to_string());
    code
}

fn fail_argument(msg: &str) -> c_int {
    store_error(msg.to_string());
    FMRG_ERR_ARGUMENT
}

fn guarded(f: impl FnOnce() -> c_int) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            store_error("internal panic".to_string());
            FMRG_ERR_PANIC
        }
    }
}

/// Opaque experiment configuration handle.
pub struct FmrgConfig {
    inner: ExperimentConfig,
}

/// Flat summary of one ensemble, mirroring the CSV row. `has_prediction` is
/// 0 when no closed-form oracle applies; the `pred_*` fields are then zero.
#[repr(C)]
pub struct FmrgSummary {
    pub lambda: f64,
    pub t_stop: f64,
    pub emp_mean: f64,
    pub emp_mean_se: f64,
    pub emp_var: f64,
    pub emp_var_se: f64,
    pub emp_reward: f64,
    pub emp_reward_se: f64,
    pub pred_mean: f64,
    pub pred_var: f64,
    pub pred_reward: f64,
    pub n_steps: u64,
    pub n_opt: u64,
    pub nfe: u64,
    pub reuse: i32,
    pub has_prediction: i32,
}

fn fill_summary(out: &mut FmrgSummary, s: &EnsembleSummary) {
    out.lambda = s.lambda;
    out.t_stop = s.t_stop;
    out.emp_mean = s.emp_mean;
    out.emp_mean_se = s.emp_mean_se;
    out.emp_var = s.emp_var;
    out.emp_var_se = s.emp_var_se;
    out.emp_reward = s.emp_reward;
    out.emp_reward_se = s.emp_reward_se;
    out.pred_mean = s.pred_mean.unwrap_or(0.0);
    out.pred_var = s.pred_var.unwrap_or(0.0);
    out.pred_reward = s.pred_reward.unwrap_or(0.0);
    out.n_steps = s.n_steps as u64;
    out.n_opt = s.n_opt as u64;
    out.nfe = s.nfe as u64;
    out.reuse = s.reuse as i32;
    out.has_prediction = s.pred_var.is_some() as i32;
}

/// # Safety
/// `text` must be a NUL-terminated string; `out` must be a valid pointer.
/// On success `*out` owns a new handle; release it with [`fmrg_config_free`].
#[no_mangle]
pub unsafe extern "C" fn fmrg_config_parse(
    text: *const c_char,
    out: *mut *mut FmrgConfig,
) -> c_int {
    guarded(|| {
        if text.is_null() || out.is_null() {
            return fail_argument("null pointer");
        }
        let Ok(text) = unsafe { CStr::from_ptr(text) }.to_str() else {
            return fail_argument("config text is not valid UTF-8");
        };
        match ExperimentConfig::from_toml_str(text).and_then(|inner| {
            inner.validate()?;
            Ok(inner)
        }) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(FmrgConfig { inner })) };
                FMRG_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `cfg` must be a handle from [`fmrg_config_parse`] or null; it must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fmrg_config_free(cfg: *mut FmrgConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// # Safety
/// `cfg` must be a live handle not shared across threads during the call.
#[no_mangle]
pub unsafe extern "C" fn fmrg_config_set_seed(cfg: *mut FmrgConfig, seed: u64) -> c_int {
    guarded(|| {
        let Some(cfg) = (unsafe { cfg.as_mut() }) else {
            return fail_argument("null config");
        };
        cfg.inner.ensemble.seed = seed;
        FMRG_OK
    })
}

/// # Safety
/// `cfg` must be a live handle not shared across threads during the call.
#[no_mangle]
pub unsafe extern "C" fn fmrg_config_set_particles(cfg: *mut FmrgConfig, n: u64) -> c_int {
    guarded(|| {
        let Some(cfg) = (unsafe { cfg.as_mut() }) else {
            return fail_argument("null config");
        };
        if n == 0 {
            return fail_argument("particle count must be positive");
        }
        cfg.inner.ensemble.n_particles = n as usize;
        FMRG_OK
    })
}

/// # Safety
/// `cfg` must be a live handle; `out` must point to writable summary storage.
#[no_mangle]
pub unsafe extern "C" fn fmrg_run_ensemble(
    cfg: *const FmrgConfig,
    out: *mut FmrgSummary,
) -> c_int {
    guarded(|| {
        let (Some(cfg), Some(out)) = (unsafe { cfg.as_ref() }, unsafe { out.as_mut() }) else {
            return fail_argument("null pointer");
        };
        match run_ensemble(&cfg.inner) {
            Ok(s) => {
                fill_summary(out, &s);
                FMRG_OK
            }
            Err(e) => fail(e),
        }
    })
}

fn csv_out(rows: &[EnsembleSummary], out: *mut *mut c_char) -> c_int {
    let text = summaries_to_csv(rows);
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            FMRG_OK
        }
        Err(_) => fail_argument("summary text contained an interior NUL"),
    }
}

/// # Safety
/// `cfg` must be a live handle; `out` receives a heap string to release with
/// [`fmrg_string_free`].
#[no_mangle]
pub unsafe extern "C" fn fmrg_run_csv(cfg: *const FmrgConfig, out: *mut *mut c_char) -> c_int {
    guarded(|| {
        let Some(cfg) = (unsafe { cfg.as_ref() }) else {
            return fail_argument("null config");
        };
        if out.is_null() {
            return fail_argument("null out pointer");
        }
        match run_ensemble(&cfg.inner) {
            Ok(s) => csv_out(&[s], out),
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// Same contract as [`fmrg_run_csv`]; the config needs a sweep section.
#[no_mangle]
pub unsafe extern "C" fn fmrg_sweep_csv(cfg: *const FmrgConfig, out: *mut *mut c_char) -> c_int {
    guarded(|| {
        let Some(cfg) = (unsafe { cfg.as_ref() }) else {
            return fail_argument("null config");
        };
        if out.is_null() {
            return fail_argument("null out pointer");
        }
        match lambda_sweep(&cfg.inner) {
            Ok(rows) => csv_out(&rows, out),
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// Same contract as [`fmrg_run_csv`]; the config needs an early_stop section.
#[no_mangle]
pub unsafe extern "C" fn fmrg_earlystop_csv(
    cfg: *const FmrgConfig,
    out: *mut *mut c_char,
) -> c_int {
    guarded(|| {
        let Some(cfg) = (unsafe { cfg.as_ref() }) else {
            return fail_argument("null config");
        };
        if out.is_null() {
            return fail_argument("null out pointer");
        }
        match early_stop_study(&cfg.inner) {
            Ok(rows) => csv_out(&rows, out),
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `cfg` must be a live handle; `out` receives a heap JSON string to release
/// with [`fmrg_string_free`].
#[no_mangle]
pub unsafe extern "C" fn fmrg_inverse_json(
    cfg: *const FmrgConfig,
    out: *mut *mut c_char,
) -> c_int {
    guarded(|| {
        let Some(cfg) = (unsafe { cfg.as_ref() }) else {
            return fail_argument("null config");
        };
        if out.is_null() {
            return fail_argument("null out pointer");
        }
        let report = match toy_inverse_problem(&cfg.inner) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let text = match serde_json_string(&report) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        match CString::new(text) {
            Ok(c) => {
                unsafe { *out = c.into_raw() };
                FMRG_OK
            }
            Err(_) => fail_argument("report contained an interior NUL"),
        }
    })
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(value).map_err(|e| Error::numerics(format!("json: {e}")))
}

/// Run the exact-identity and flow-axiom suite. Returns 0 when every check
/// passes, 4 when any fails, 3 on a numerical breakdown.
#[no_mangle]
pub extern "C" fn fmrg_verify(seed: u64) -> c_int {
    guarded(|| match verify_suite(seed) {
        Ok(checks) => {
            let failed: Vec<&str> =
                checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                FMRG_OK
            } else {
                store_error(format!("failed checks: {}", failed.join(", ")));
                FMRG_ERR_VERIFY
            }
        }
        Err(e) => fail(e),
    })
}

/// Matched stop time: guidance halted there reproduces the exact-control
/// terminal variance.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fmrg_solve_t_stop(sigma1: f64, lambda: f64, out: *mut f64) -> c_int {
    guarded(|| {
        if out.is_null() {
            return fail_argument("null out pointer");
        }
        match theory::solve_t_stop(sigma1, lambda) {
            Ok(t) => {
                unsafe { *out = t };
                FMRG_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `s` must come from this library's out-pointers (or be null).
#[no_mangle]
pub unsafe extern "C" fn fmrg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn fmrg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map(|c| c.as_ptr()).unwrap_or(std::ptr::null())
    })
}
