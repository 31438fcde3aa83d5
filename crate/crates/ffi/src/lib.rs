//! C interface to the `qstab` library.
//!
//! Objects are opaque heap handles created by `*_new`/`*_from_*` functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`QstabStatus`] and writes its result through an out-pointer only on
//! success. The message of the last failure on the calling thread is
//! available from [`qstab_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use qstab::belief::ObservationScheme;
use qstab::mdp::{solve_rvi, RviOptions};
use qstab::model::{mu_star_full, mu_star_no};
use qstab::policy::FiniteController;
use qstab::qbd::stability_bound;
use qstab::simulate::{run, Policy, SimConfig, SimMode};
use qstab::{Error, SystemConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QstabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    NonConvergence = 4,
    Incompatible = 5,
    Resource = 6,
    Panic = 7,
}

/// Observation schemes, as accepted by the `scheme` arguments.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QstabScheme {
    Full = 0,
    State = 1,
    Output = 2,
    Queue = 3,
    None = 4,
}

/// System parameters: arrival rate and both servers.
pub struct QstabSystem {
    inner: SystemConfig,
}

/// Finite-state controller for the output-observation scheme.
pub struct QstabController {
    inner: FiniteController,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> QstabStatus {
    match err {
        Error::NonConvergence { .. } => QstabStatus::NonConvergence,
        Error::Config(_) | Error::Json(_) | Error::Io(_) => QstabStatus::Config,
        Error::UnsupportedScheme(_) | Error::IncompatiblePolicy { .. } => QstabStatus::Incompatible,
        Error::Resource(_) => QstabStatus::Resource,
        _ => QstabStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for [`qstab_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (QstabStatus, String)>) -> QstabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QstabStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            QstabStatus::Panic
        }
    }
}

fn lib<T>(r: qstab::Result<T>) -> Result<T, (QstabStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (QstabStatus, String) {
    (QstabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (QstabStatus, String)> {
    // SAFETY: the caller guarantees `p` is null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), (QstabStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and, per the caller's contract, valid for writes.
    unsafe { out.write(value) };
    Ok(())
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, (QstabStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and, per the caller's contract, NUL-terminated.
    unsafe { CStr::from_ptr(s) }.to_str().map_err(|_| (QstabStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn scheme_of(code: i32) -> Result<ObservationScheme, (QstabStatus, String)> {
    Ok(match code {
        0 => ObservationScheme::Full,
        1 => ObservationScheme::State,
        2 => ObservationScheme::Output,
        3 => ObservationScheme::Queue,
        4 => ObservationScheme::None,
        other => return Err((QstabStatus::InvalidArgument, format!("unknown scheme code {other}"))),
    })
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qstab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qstab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Benchmark servers (`gamma = 0.5`, `mu0 = 0.2`, `mu1 = 0.8`) with the
/// given correlations.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn qstab_system_benchmark(
    rho1: f64,
    rho2: f64,
    lambda: f64,
    out: *mut *mut QstabSystem,
) -> QstabStatus {
    guard(|| {
        let inner = lib(SystemConfig::benchmark(rho1, rho2, lambda))?;
        unsafe { write(out, Box::into_raw(Box::new(QstabSystem { inner })), "out") }
    })
}

/// System from a JSON document.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn qstab_system_from_json(json: *const c_char, out: *mut *mut QstabSystem) -> QstabStatus {
    guard(|| {
        let text = unsafe { read_str(json, "json") }?;
        let inner = lib(SystemConfig::from_json_str(text))?;
        unsafe { write(out, Box::into_raw(Box::new(QstabSystem { inner })), "out") }
    })
}

/// Releases a system. NULL is ignored.
///
/// # Safety
/// `system` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qstab_system_free(system: *mut QstabSystem) {
    if !system.is_null() {
        // SAFETY: created by Box::into_raw in this library and not yet freed.
        drop(unsafe { Box::from_raw(system) });
    }
}

/// Throughput of always serving with the best server on average.
///
/// # Safety
/// `system` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn qstab_mu_star_no(system: *const QstabSystem, out: *mut f64) -> QstabStatus {
    guard(|| {
        let s = unsafe { deref(system, "system") }?;
        unsafe { write(out, lib(mu_star_no(&s.inner))?, "out") }
    })
}

/// Throughput when both environment states are observed.
///
/// # Safety
/// `system` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn qstab_mu_star_full(system: *const QstabSystem, out: *mut f64) -> QstabStatus {
    guard(|| {
        let s = unsafe { deref(system, "system") }?;
        unsafe { write(out, lib(mu_star_full(&s.inner))?, "out") }
    })
}

/// Controller of size `m` following the symmetric myopic rule.
///
/// # Safety
/// `system` must be a live handle; `out` valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn qstab_controller_myopic(
    system: *const QstabSystem,
    m: usize,
    epsilon: f64,
    out: *mut *mut QstabController,
) -> QstabStatus {
    guard(|| {
        let s = unsafe { deref(system, "system") }?;
        let inner = lib(FiniteController::symmetric_myopic(&s.inner, m, epsilon))?;
        unsafe { write(out, Box::into_raw(Box::new(QstabController { inner })), "out") }
    })
}

/// Controller from its JSON document.
///
/// # Safety
/// `json` must be NUL-terminated; `out` valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn qstab_controller_from_json(
    json: *const c_char,
    out: *mut *mut QstabController,
) -> QstabStatus {
    guard(|| {
        let text = unsafe { read_str(json, "json") }?;
        let inner = lib(FiniteController::from_json(text))?;
        unsafe { write(out, Box::into_raw(Box::new(QstabController { inner })), "out") }
    })
}

/// Releases a controller. NULL is ignored.
///
/// # Safety
/// `controller` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qstab_controller_free(controller: *mut QstabController) {
    if !controller.is_null() {
        // SAFETY: created by Box::into_raw in this library and not yet freed.
        drop(unsafe { Box::from_raw(controller) });
    }
}

/// Controller size `M`, or 0 for NULL.
///
/// # Safety
/// `controller` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qstab_controller_size(controller: *const QstabController) -> usize {
    // SAFETY: null or live, per the contract.
    unsafe { controller.as_ref() }.map_or(0, |c| c.inner.m())
}

/// Arrival rates below the returned bound keep the queue stable under the
/// controller. The arrival rate of `system` is not used.
///
/// # Safety
/// Both handles must be live; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn qstab_stability_bound(
    controller: *const QstabController,
    system: *const QstabSystem,
    out: *mut f64,
) -> QstabStatus {
    guard(|| {
        let c = unsafe { deref(controller, "controller") }?;
        let s = unsafe { deref(system, "system") }?;
        unsafe { write(out, lib(stability_bound(&c.inner, &s.inner))?, "out") }
    })
}

/// Optimal throughput of a partial-observation scheme by relative value
/// iteration on a grid of `cells` cells per axis.
///
/// # Safety
/// `system` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn qstab_solve_rvi(
    system: *const QstabSystem,
    scheme: i32,
    cells: usize,
    tol: f64,
    max_iters: usize,
    out: *mut f64,
) -> QstabStatus {
    guard(|| {
        let s = unsafe { deref(system, "system") }?;
        let opts = RviOptions { cells, tol, max_iters, ..RviOptions::default() };
        let table = lib(solve_rvi(scheme_of(scheme)?, &s.inner, opts))?;
        unsafe { write(out, table.mu_star, "out") }
    })
}

/// Saturated throughput of the myopic policy over `horizon` slots.
///
/// # Safety
/// `system` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn qstab_simulate_myopic(
    system: *const QstabSystem,
    scheme: i32,
    horizon: u64,
    seed: u64,
    out: *mut f64,
) -> QstabStatus {
    guard(|| {
        let s = unsafe { deref(system, "system") }?;
        let sim = SimConfig::new(s.inner, scheme_of(scheme)?, horizon, seed, SimMode::Saturated);
        let res = lib(run(&sim, &Policy::Myopic))?;
        unsafe { write(out, res.throughput, "out") }
    })
}

/// Saturated throughput of a controller under output observations.
///
/// # Safety
/// Both handles must be live; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn qstab_simulate_controller(
    controller: *const QstabController,
    system: *const QstabSystem,
    horizon: u64,
    seed: u64,
    out: *mut f64,
) -> QstabStatus {
    guard(|| {
        let c = unsafe { deref(controller, "controller") }?;
        let s = unsafe { deref(system, "system") }?;
        let sim = SimConfig::new(s.inner, ObservationScheme::Output, horizon, seed, SimMode::Saturated);
        let res = lib(run(&sim, &Policy::Controller(c.inner.clone())))?;
        unsafe { write(out, res.throughput, "out") }
    })
}
