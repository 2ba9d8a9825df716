//! C ABI over the `fpcert` library.
//!
//! Every function returns an [`FpcertStatus`]; results go through out
//! pointers. After a non-zero status, `fpcert_last_error_message` returns the
//! message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use fpcert::bounds::{self, RateKind};
use fpcert::fixed_point::{self, NonFinitePolicy, TraceTensor};
use fpcert::pipeline::{self, RunOptions};
use fpcert::{kl, Error};

/// Status codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpcertStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Domain = 3,
    Precondition = 4,
    Budget = 5,
    NonFinite = 6,
    Parse = 7,
    Config = 8,
    Linalg = 9,
    Io = 10,
    InfiniteDivergence = 11,
    NonDifferentiable = 12,
    OutOfRange = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpcertRateKind {
    Linear = 0,
    Averaged = 1,
}

/// Opaque handle to a loaded trace tensor.
pub struct FpcertTrace {
    inner: TraceTensor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FpcertStatus {
    match e {
        Error::InfiniteDivergence { .. } => FpcertStatus::InfiniteDivergence,
        Error::NonDifferentiable { .. } => FpcertStatus::NonDifferentiable,
        Error::Domain(_) => FpcertStatus::Domain,
        Error::Precondition(_) => FpcertStatus::Precondition,
        Error::Budget(_) => FpcertStatus::Budget,
        Error::NonFinite(_) => FpcertStatus::NonFinite,
        Error::Parse { .. } => FpcertStatus::Parse,
        Error::Config { .. } => FpcertStatus::Config,
        Error::Linalg(_) => FpcertStatus::Linalg,
        Error::Io(_) => FpcertStatus::Io,
    }
}

fn fail(status: FpcertStatus, msg: impl Into<String>) -> FpcertStatus {
    set_error(msg.into());
    status
}

fn guard<F: FnOnce() -> Result<(), FpcertStatus>>(f: F) -> FpcertStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpcertStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(FpcertStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: fpcert::Result<T>) -> Result<T, FpcertStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, FpcertStatus> {
    p.as_mut().ok_or_else(|| fail(FpcertStatus::NullPointer, format!("{name} is null")))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, FpcertStatus> {
    if p.is_null() {
        return Err(fail(FpcertStatus::NullPointer, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| fail(FpcertStatus::InvalidUtf8, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message for the last failing call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fpcert_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Bernoulli KL divergence kl(q || p).
///
/// # Safety
/// `out_kl` must be a valid pointer or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_bernoulli_kl(q: f64, p: f64, out_kl: *mut f64) -> FpcertStatus {
    guard(|| {
        let o = out(out_kl, "out_kl")?;
        *o = lift(kl::bernoulli_kl(q, p))?;
        Ok(())
    })
}

/// Largest p in [q, 1) with kl(q || p) <= c.
///
/// # Safety
/// `out_p` must be a valid pointer or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_kl_inverse(q: f64, c: f64, out_p: *mut f64) -> FpcertStatus {
    guard(|| {
        let o = out(out_p, "out_p")?;
        if !(0.0..=1.0).contains(&q) || c.is_nan() {
            return Err(fail(FpcertStatus::Domain, format!("kl_inverse needs q in [0,1], got q={q}, c={c}")));
        }
        *o = kl::kl_inverse(q, c);
        Ok(())
    })
}

/// Partial derivatives of the KL inverse with respect to q and c.
///
/// # Safety
/// `out_dq` and `out_dc` must be valid pointers or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_kl_inverse_grad(q: f64, c: f64, out_dq: *mut f64, out_dc: *mut f64) -> FpcertStatus {
    guard(|| {
        let dq = out(out_dq, "out_dq")?;
        let dc = out(out_dc, "out_dc")?;
        let (a, b) = lift(kl::kl_inverse_grad(q, c))?;
        *dq = a;
        *dc = b;
        Ok(())
    })
}

/// Sample-convergence risk bound kl_inverse(r_hat, log(2/delta)/n).
///
/// # Safety
/// `out_bound` must be a valid pointer or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_sample_convergence_bound(r_hat: f64, n: usize, delta: f64, out_bound: *mut f64) -> FpcertStatus {
    guard(|| {
        let o = out(out_bound, "out_bound")?;
        *o = lift(bounds::sample_convergence_bound(r_hat, n, delta))?;
        Ok(())
    })
}

/// PAC-Bayes bound kl_inverse(r_hat, (kl + log(2 sqrt(n)/delta))/n).
///
/// # Safety
/// `out_bound` must be a valid pointer or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_maurer_bound(r_hat: f64, n: usize, kl_div: f64, delta: f64, out_bound: *mut f64) -> FpcertStatus {
    guard(|| {
        let o = out(out_bound, "out_bound")?;
        *o = lift(bounds::maurer_bound(r_hat, n, kl_div, delta))?;
        Ok(())
    })
}

/// Overall confidence of the risk certificates and of the quantile bounds.
///
/// # Safety
/// Output pointers must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_confidence_ledger(
    delta: f64,
    omega: f64,
    n_btargets: usize,
    n_tolerances: usize,
    out_risk: *mut f64,
    out_quantile: *mut f64,
) -> FpcertStatus {
    guard(|| {
        let r = out(out_risk, "out_risk")?;
        let q = out(out_quantile, "out_quantile")?;
        let (a, b) = lift(bounds::confidence_ledger(delta, omega, n_btargets, n_tolerances))?;
        *r = a;
        *q = b;
        Ok(())
    })
}

/// Worst-case residual ratio after k steps for a contractive or averaged operator.
///
/// # Safety
/// `out_rate` must be a valid pointer or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_worst_case_rate(kind: FpcertRateKind, param: f64, k: usize, out_rate: *mut f64) -> FpcertStatus {
    guard(|| {
        let o = out(out_rate, "out_rate")?;
        let kind = match kind {
            FpcertRateKind::Linear => RateKind::Linear,
            FpcertRateKind::Averaged => RateKind::Averaged,
        };
        *o = lift(bounds::worst_case_rate(kind, param, k))?;
        Ok(())
    })
}

fn load_trace(path: &Path) -> fpcert::Result<TraceTensor> {
    let f = std::fs::File::open(path)?;
    TraceTensor::read_binary(std::io::BufReader::new(f))
}

/// Loads a binary trace file. Release with `fpcert_trace_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_handle` a valid pointer or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_trace_load(path: *const c_char, out_handle: *mut *mut FpcertTrace) -> FpcertStatus {
    guard(|| {
        let o = out(out_handle, "out_handle")?;
        *o = std::ptr::null_mut();
        let p = path_arg(path, "path")?;
        let t = lift(load_trace(&p))?;
        *o = Box::into_raw(Box::new(FpcertTrace { inner: t }));
        Ok(())
    })
}

/// Dimensions of a loaded trace.
///
/// # Safety
/// `handle` must come from `fpcert_trace_load`; outputs valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_trace_dims(
    handle: *const FpcertTrace,
    out_n: *mut usize,
    out_h: *mut usize,
    out_k_max: *mut usize,
) -> FpcertStatus {
    guard(|| {
        let t = &handle.as_ref().ok_or_else(|| fail(FpcertStatus::NullPointer, "handle is null"))?.inner;
        *out(out_n, "out_n")? = t.n;
        *out(out_h, "out_h")? = t.h;
        *out(out_k_max, "out_k_max")? = t.k_max;
        Ok(())
    })
}

/// Metric value for instance i, weight sample j, iteration k.
///
/// # Safety
/// `handle` must come from `fpcert_trace_load`; `out_value` valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_trace_get(handle: *const FpcertTrace, i: usize, j: usize, k: usize, out_value: *mut f64) -> FpcertStatus {
    guard(|| {
        let t = &handle.as_ref().ok_or_else(|| fail(FpcertStatus::NullPointer, "handle is null"))?.inner;
        let o = out(out_value, "out_value")?;
        if i >= t.n || j >= t.h || k > t.k_max {
            return Err(fail(FpcertStatus::OutOfRange, format!("index ({i},{j},{k}) outside ({},{},{})", t.n, t.h, t.k_max + 1)));
        }
        *o = t.get(i, j, k);
        Ok(())
    })
}

/// Fraction of trajectories whose metric at step k is at least epsilon.
///
/// # Safety
/// `handle` must come from `fpcert_trace_load`; `out_risk` valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn fpcert_trace_empirical_risk(handle: *const FpcertTrace, k: usize, epsilon: f64, out_risk: *mut f64) -> FpcertStatus {
    guard(|| {
        let t = &handle.as_ref().ok_or_else(|| fail(FpcertStatus::NullPointer, "handle is null"))?.inner;
        let o = out(out_risk, "out_risk")?;
        if k > t.k_max {
            return Err(fail(FpcertStatus::OutOfRange, format!("k={k} exceeds k_max={}", t.k_max)));
        }
        *o = fixed_point::empirical_risk(t, k, epsilon);
        Ok(())
    })
}

/// Releases a trace handle. NULL is ignored.
///
/// # Safety
/// `handle` must come from `fpcert_trace_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fpcert_trace_free(handle: *mut FpcertTrace) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Runs every pipeline stage for a JSON config. `out_dir` may be NULL to use
/// the directory named in the config. A negative `seed` keeps the config seed.
/// Non-finite rollouts abort the run when `strict_finite` is non-zero.
///
/// # Safety
/// `config_path` and a non-NULL `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fpcert_run_config(config_path: *const c_char, out_dir: *const c_char, seed: i64, strict_finite: i32) -> FpcertStatus {
    guard(|| {
        let cfg = path_arg(config_path, "config_path")?;
        let out_dir = if out_dir.is_null() { None } else { Some(path_arg(out_dir, "out_dir")?) };
        let opts = RunOptions {
            seed: u64::try_from(seed).ok(),
            out: out_dir,
            policy: if strict_finite != 0 { NonFinitePolicy::Abort } else { NonFinitePolicy::CountAsFailure },
        };
        lift(pipeline::run_config(&cfg, &opts))?;
        Ok(())
    })
}
