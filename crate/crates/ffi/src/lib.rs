//! C interface to `nmp-core`.
//!
//! Handles are opaque and owned by the caller; free them with the matching
//! `*_free`. Every fallible call returns an [`NmpStatus`]; on failure the
//! message is kept per thread and read back with [`nmp_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nmp_core::equilibrium::{pk_rate, pk_rate_in_system, stationary_state, StationaryOptions};
use nmp_core::flow::{nmp_trace, EngineConfig};
use nmp_core::{Error, ServiceDistribution, StateMeasure, TypeBSpec};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Json = 3,
    InvalidSpec = 4,
    OutOfRange = 5,
    Budget = 6,
    NotConverged = 7,
    Panic = 8,
    Other = 9,
}

/// Service distribution handle.
pub struct NmpDist(ServiceDistribution);

/// State measure handle.
pub struct NmpMeasure(StateMeasure);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> NmpStatus {
    match e {
        Error::Json(_) => NmpStatus::Json,
        Error::InvalidSpec(_)
        | Error::EmptyBlock { .. }
        | Error::AtomOutOfRange { .. }
        | Error::NonIncreasing { .. } => NmpStatus::InvalidSpec,
        Error::OutOfRange { .. } | Error::NegativeRate { .. } | Error::HazardTable { .. } => NmpStatus::OutOfRange,
        Error::ConservationBudget { .. } => NmpStatus::Budget,
        Error::NotConverged { .. } | Error::SearchExhausted { .. } => NmpStatus::NotConverged,
        _ => NmpStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), NmpStatus>) -> NmpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NmpStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside nmp".into());
            NmpStatus::Panic
        }
    }
}

fn fail(e: Error) -> NmpStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> NmpStatus {
    set_error(format!("{what} is null"));
    NmpStatus::NullPointer
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, NmpStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(p: *mut T, v: T, what: &str) -> Result<(), NmpStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nmp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nmp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a distribution from a service spec such as
/// `{"blocks": [[1, 1], [3, 3]], "last": true}`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmp_dist_from_json(json: *const c_char, out: *mut *mut NmpDist) -> NmpStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| {
            set_error(e.to_string());
            NmpStatus::InvalidUtf8
        })?;
        let spec: TypeBSpec = serde_json::from_str(text).map_err(|e| fail(e.into()))?;
        let d = spec.build().map_err(fail)?;
        write(out, Box::into_raw(Box::new(NmpDist(d))), "out")
    })
}

/// # Safety
/// `d` must come from [`nmp_dist_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nmp_dist_free(d: *mut NmpDist) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Completion probability at elapsed time `tau >= 1`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nmp_dist_hazard(d: *const NmpDist, tau: u64, out: *mut f64) -> NmpStatus {
    guard(|| {
        let d = deref(d, "dist")?;
        write(out, d.0.hazard(tau).map_err(fail)?, "out")
    })
}

/// First and second moments.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nmp_dist_moments(d: *const NmpDist, m1: *mut f64, m2: *mut f64) -> NmpStatus {
    guard(|| {
        let d = deref(d, "dist")?;
        write(m1, d.0.mean(), "m1")?;
        write(m2, d.0.second_moment(), "m2")
    })
}

/// Largest service time.
///
/// # Safety
/// `d` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nmp_dist_max_service(d: *const NmpDist) -> u64 {
    d.as_ref().map_or(0, |d| d.0.max_service())
}

/// Measure from parallel arrays; `n = 0` is the idle state.
///
/// # Safety
/// The three arrays must hold `len` elements each.
#[no_mangle]
pub unsafe extern "C" fn nmp_measure_from_atoms(
    n: *const u64,
    tau: *const u64,
    mass: *const f64,
    len: usize,
    out: *mut *mut NmpMeasure,
) -> NmpStatus {
    guard(|| {
        let mut mu = StateMeasure::empty();
        if len > 0 {
            if n.is_null() || tau.is_null() || mass.is_null() {
                return Err(null("atom array"));
            }
            let (n, tau, mass) = (
                std::slice::from_raw_parts(n, len),
                std::slice::from_raw_parts(tau, len),
                std::slice::from_raw_parts(mass, len),
            );
            for i in 0..len {
                mu.add(n[i], tau[i], mass[i]).map_err(fail)?;
            }
        }
        write(out, Box::into_raw(Box::new(NmpMeasure(mu))), "out")
    })
}

/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nmp_measure_free(m: *mut NmpMeasure) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nmp_measure_mean_queue(m: *const NmpMeasure, out: *mut f64) -> NmpStatus {
    guard(|| write(out, deref(m, "measure")?.0.mean_queue(), "out"))
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nmp_measure_idle_mass(m: *const NmpMeasure, out: *mut f64) -> NmpStatus {
    guard(|| write(out, deref(m, "measure")?.0.idle_mass(), "out"))
}

/// Mass at `(n, tau)`; `(0, 0)` is idle.
///
/// # Safety
/// `m` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nmp_measure_get(m: *const NmpMeasure, n: u64, tau: u64) -> f64 {
    match m.as_ref() {
        None => f64::NAN,
        Some(m) if n == 0 => {
            if tau == 0 {
                m.0.idle_mass()
            } else {
                0.0
            }
        }
        Some(m) => m.0.get(n, tau),
    }
}

/// Runs `horizon` endogenous steps with default tolerances, writing
/// `lambda(1..=horizon)` into `lambda_out`. When `final_state` is non-null it
/// receives a new measure handle.
///
/// # Safety
/// `lambda_out` must hold `horizon` doubles.
#[no_mangle]
pub unsafe extern "C" fn nmp_run(
    d: *const NmpDist,
    nu: *const NmpMeasure,
    horizon: usize,
    lambda_out: *mut f64,
    final_state: *mut *mut NmpMeasure,
) -> NmpStatus {
    guard(|| {
        let d = deref(d, "dist")?;
        let nu = deref(nu, "measure")?;
        if lambda_out.is_null() && horizon > 0 {
            return Err(null("lambda_out"));
        }
        let (trace, state) = nmp_trace(&nu.0, &d.0, horizon, &EngineConfig::default()).map_err(fail)?;
        ptr::copy_nonoverlapping(trace.lambda.as_ptr(), lambda_out, horizon);
        if !final_state.is_null() {
            final_state.write(Box::into_raw(Box::new(NmpMeasure(state))));
        }
        Ok(())
    })
}

/// Closed-form stationary rate for mean queue `rho` as printed in the
/// literature (queue-only).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmp_pk_rate(rho: f64, m1: f64, m2: f64, out: *mut f64) -> NmpStatus {
    guard(|| write(out, pk_rate(rho, m1, m2).map_err(fail)?, "out"))
}

/// Stationary rate for mean number in system `rho`, matching the dynamics.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmp_pk_rate_in_system(rho: f64, m1: f64, m2: f64, out: *mut f64) -> NmpStatus {
    guard(|| write(out, pk_rate_in_system(rho, m1, m2).map_err(fail)?, "out"))
}

/// Long-run state at mean queue `rho`. `state_out` may be null.
///
/// # Safety
/// `rate_out` must be writable; `state_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn nmp_stationary(
    d: *const NmpDist,
    rho: f64,
    rate_out: *mut f64,
    state_out: *mut *mut NmpMeasure,
) -> NmpStatus {
    guard(|| {
        let d = deref(d, "dist")?;
        let r = stationary_state(&d.0, rho, &StationaryOptions::default(), &EngineConfig::default())
            .map_err(fail)?;
        write(rate_out, r.rate, "rate_out")?;
        if !state_out.is_null() {
            state_out.write(Box::into_raw(Box::new(NmpMeasure(r.state))));
        }
        Ok(())
    })
}
