//! C ABI for `lawreg`.
//!
//! Objects cross the boundary as opaque handles created by `lawreg_*_new` style functions
//! and released with the matching `lawreg_*_free`. Every fallible call returns a
//! [`LawregStatus`]; on failure the message is kept per thread and can be copied out with
//! [`lawreg_last_error`]. Panics are caught and reported as `LAWREG_STATUS_PANIC`.
//! Output strings use the two-call pattern: pass `cap = 0` to learn the size (including
//! the terminating NUL), then call again with a large enough buffer.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lawreg::balance::{dk_distance, ParticleMeasure, TestDictionary, Verdict};
use lawreg::cli::{parse_config, run_experiment};
use lawreg::gridfn::{GridFunction, Lattice};
use lawreg::young_orlicz::{luxembourg_norm, sobolev_orlicz_norm, YoungFunction};
use lawreg::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawregStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    BufferTooSmall = 4,
    InvalidGrid = 5,
    GridTooCoarse = 6,
    DimensionMismatch = 7,
    NotYoung = 8,
    NonIntegrable = 9,
    CurveTooShort = 10,
    SingularCovariance = 11,
    UnstableGrid = 12,
    PointsTooClose = 13,
    ConfigError = 14,
    /// Any other numerical failure of the core library.
    Numerical = 15,
    Panic = 16,
}

/// Verdict codes of a finished run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawregVerdict {
    /// The run was a check suite without a balance verdict.
    None = 0,
    Regular = 1,
    Inconclusive = 2,
}

/// Young function handle.
pub struct LawregYoung(YoungFunction);

/// Function sampled on a regular lattice.
pub struct LawregGrid(GridFunction);

/// Weighted particle measure.
pub struct LawregMeasure(ParticleMeasure);

/// Result of a config-driven experiment.
pub struct LawregReport {
    pass: bool,
    verdict: LawregVerdict,
    json: String,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> LawregStatus {
    match e {
        Error::InvalidGrid(_) => LawregStatus::InvalidGrid,
        Error::GridTooCoarse(_) | Error::MarginTooSmall => LawregStatus::GridTooCoarse,
        Error::DimensionMismatch(..) => LawregStatus::DimensionMismatch,
        Error::NotYoung(_) => LawregStatus::NotYoung,
        Error::NonIntegrable | Error::Divergent => LawregStatus::NonIntegrable,
        Error::CurveTooShort(_) => LawregStatus::CurveTooShort,
        Error::SingularCovariance | Error::SingularMomentSystem(_) => LawregStatus::SingularCovariance,
        Error::UnstableGrid(_) => LawregStatus::UnstableGrid,
        Error::PointsTooClose(_) => LawregStatus::PointsTooClose,
        Error::InvalidArgument(_) => LawregStatus::InvalidArgument,
        _ => LawregStatus::Numerical,
    }
}

fn fail(e: Error) -> LawregStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> LawregStatus {
    set_error(format!("null pointer: {what}"));
    LawregStatus::NullPointer
}

fn guard(f: impl FnOnce() -> LawregStatus) -> LawregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == LawregStatus::Ok {
                set_error("");
            }
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            LawregStatus::Panic
        }
    }
}

unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> LawregStatus {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if cap == 0 && buf.is_null() {
        return LawregStatus::Ok;
    }
    if buf.is_null() {
        return null("buf");
    }
    if cap < n {
        set_error(format!("buffer holds {cap} bytes, need {n}"));
        return LawregStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
    *buf.add(s.len()) = 0;
    LawregStatus::Ok
}

unsafe fn put<T>(out: *mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

/// Copies the calling thread's last error message.
///
/// # Safety
/// `buf` must hold `cap` bytes (or be null with `cap == 0`); `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn lawreg_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> LawregStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(&msg, buf, cap, needed)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lawreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ------------------------------------------------------------- scalars

/// Normalized Hermite function `h_n(t)`.
#[no_mangle]
pub extern "C" fn lawreg_hermite_h(n: usize, t: f64) -> f64 {
    lawreg::hermite::hermite_h(n, t)
}

/// Neumann heat kernel `G_t(x, y)` on `[0, 1]` (NaN for `t <= 0`).
#[no_mangle]
pub extern "C" fn lawreg_neumann_kernel(t: f64, x: f64, y: f64) -> f64 {
    lawreg::heat_lab::neumann_kernel(t, x, y, 4000)
}

// ------------------------------------------------------------- Young functions

/// `e(t) = (1 + |t|) ln(1 + |t|)`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_young_log_entropy(out: *mut *mut LawregYoung) -> LawregStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        put(out, LawregYoung(YoungFunction::log_entropy()));
        LawregStatus::Ok
    })
}

/// `e(t) = t^p`, `p > 1`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_young_power(p: f64, out: *mut *mut LawregYoung) -> LawregStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        match YoungFunction::power(p) {
            Ok(e) => {
                put(out, LawregYoung(e));
                LawregStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Evaluates `e(t)`.
///
/// # Safety
/// `e` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_young_eval(e: *const LawregYoung, t: f64, out: *mut f64) -> LawregStatus {
    guard(|| {
        if e.is_null() || out.is_null() {
            return null("e/out");
        }
        *out = (*e).0.eval(t);
        LawregStatus::Ok
    })
}

/// `beta_e(t)`.
///
/// # Safety
/// `e` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_young_beta(e: *const LawregYoung, t: f64, out: *mut f64) -> LawregStatus {
    guard(|| {
        if e.is_null() || out.is_null() {
            return null("e/out");
        }
        *out = (*e).0.beta(t);
        LawregStatus::Ok
    })
}

/// # Safety
/// `e` must come from a `lawreg_young_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lawreg_young_free(e: *mut LawregYoung) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

// ------------------------------------------------------------- grids

/// Lattice function: `dim` axes, axis `a` spanning `[lo[a], hi[a]]` with `n[a]` nodes,
/// `values` row-major with the last axis fastest.
///
/// # Safety
/// `lo`, `hi`, `n` hold `dim` entries; `values` holds `prod n` entries; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_grid_new(
    dim: usize,
    lo: *const f64,
    hi: *const f64,
    n: *const usize,
    values: *const f64,
    out: *mut *mut LawregGrid,
) -> LawregStatus {
    guard(|| {
        if lo.is_null() || hi.is_null() || n.is_null() || values.is_null() || out.is_null() {
            return null("lo/hi/n/values/out");
        }
        if dim == 0 {
            return fail(Error::InvalidArgument("dim must be positive".into()));
        }
        let lo = std::slice::from_raw_parts(lo, dim);
        let hi = std::slice::from_raw_parts(hi, dim);
        let n = std::slice::from_raw_parts(n, dim);
        let lat = match Lattice::new(lo, hi, n) {
            Ok(l) => l,
            Err(e) => return fail(e),
        };
        let vals = std::slice::from_raw_parts(values, lat.len()).to_vec();
        match GridFunction::new(lat, vals) {
            Ok(g) => {
                put(out, LawregGrid(g));
                LawregStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of lattice nodes.
///
/// # Safety
/// `g` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lawreg_grid_len(g: *const LawregGrid) -> usize {
    if g.is_null() {
        return 0;
    }
    (*g).0.values().len()
}

/// Luxembourg norm `||g||_(e)`.
///
/// # Safety
/// Handles must be live; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_luxembourg_norm(g: *const LawregGrid, e: *const LawregYoung, out: *mut f64) -> LawregStatus {
    guard(|| {
        if g.is_null() || e.is_null() || out.is_null() {
            return null("g/e/out");
        }
        match luxembourg_norm(&(*g).0, &(*e).0) {
            Ok(v) => {
                *out = v;
                LawregStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// `sum_{|alpha| <= k} ||d^alpha g||_(e)`.
///
/// # Safety
/// Handles must be live; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_sobolev_orlicz_norm(
    g: *const LawregGrid,
    k: usize,
    e: *const LawregYoung,
    out: *mut f64,
) -> LawregStatus {
    guard(|| {
        if g.is_null() || e.is_null() || out.is_null() {
            return null("g/e/out");
        }
        match sobolev_orlicz_norm(&(*g).0, k, &(*e).0) {
            Ok(v) => {
                *out = v;
                LawregStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// # Safety
/// `g` must come from [`lawreg_grid_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lawreg_grid_free(g: *mut LawregGrid) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

// ------------------------------------------------------------- measures

/// Weighted particles; `positions` row-major (`dim` per particle).
/// `weights` may be null for the empirical measure.
///
/// # Safety
/// `positions` holds `dim * n` entries, `weights` (if non-null) `n`; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_measure_new(
    dim: usize,
    n: usize,
    positions: *const f64,
    weights: *const f64,
    out: *mut *mut LawregMeasure,
) -> LawregStatus {
    guard(|| {
        if positions.is_null() || out.is_null() {
            return null("positions/out");
        }
        let pos = std::slice::from_raw_parts(positions, dim * n).to_vec();
        let m = if weights.is_null() {
            ParticleMeasure::empirical(dim, pos)
        } else {
            ParticleMeasure::new(dim, pos, std::slice::from_raw_parts(weights, n).to_vec())
        };
        match m {
            Ok(m) => {
                put(out, LawregMeasure(m));
                LawregStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Certified lower bound on `d_k(mu, nu)` from the standard dictionary centred at
/// `center` (`dim` entries) with length scale `scale`.
///
/// # Safety
/// Handles must be live; `center` holds `dim` entries; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_dk_lower(
    mu: *const LawregMeasure,
    nu: *const LawregMeasure,
    k: usize,
    center: *const f64,
    scale: f64,
    out: *mut f64,
) -> LawregStatus {
    guard(|| {
        if mu.is_null() || nu.is_null() || center.is_null() || out.is_null() {
            return null("mu/nu/center/out");
        }
        let d = (*mu).0.dim();
        let c = std::slice::from_raw_parts(center, d);
        let dict = match TestDictionary::standard(d, c, scale, k.max(1)) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        match dk_distance(&(*mu).0, &(*nu).0, k, &dict) {
            Ok(est) => {
                *out = est.lower;
                LawregStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `m` must come from [`lawreg_measure_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lawreg_measure_free(m: *mut LawregMeasure) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

// ------------------------------------------------------------- experiments

/// Runs a JSON experiment config (the CLI format) in the global thread pool.
/// Config errors return `LAWREG_STATUS_CONFIG_ERROR` with a `line:column: message` error.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lawreg_run(config: *const c_char, out: *mut *mut LawregReport) -> LawregStatus {
    guard(|| {
        if config.is_null() || out.is_null() {
            return null("config/out");
        }
        let text = match CStr::from_ptr(config).to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error("config is not UTF-8");
                return LawregStatus::InvalidUtf8;
            }
        };
        let cfg = match parse_config(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return LawregStatus::ConfigError;
            }
        };
        match run_experiment(&cfg) {
            Ok(o) => {
                let verdict = match o.verdict {
                    None => LawregVerdict::None,
                    Some(Verdict::Regular) => LawregVerdict::Regular,
                    Some(Verdict::Inconclusive) => LawregVerdict::Inconclusive,
                };
                put(out, LawregReport { pass: o.pass, verdict, json: o.report_json(&cfg.kind) });
                LawregStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Whether the run passed (regular verdict or all checks met).
///
/// # Safety
/// `r` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lawreg_report_pass(r: *const LawregReport) -> bool {
    !r.is_null() && (*r).pass
}

/// # Safety
/// `r` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lawreg_report_verdict(r: *const LawregReport) -> LawregVerdict {
    if r.is_null() {
        return LawregVerdict::None;
    }
    (*r).verdict
}

/// Copies the `report.json` document.
///
/// # Safety
/// `r` must be a live handle; `buf` holds `cap` bytes (or is null with `cap == 0`).
#[no_mangle]
pub unsafe extern "C" fn lawreg_report_json(r: *const LawregReport, buf: *mut c_char, cap: usize, needed: *mut usize) -> LawregStatus {
    guard(|| {
        if r.is_null() {
            return null("r");
        }
        copy_out(&(*r).json, buf, cap, needed)
    })
}

/// # Safety
/// `r` must come from [`lawreg_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lawreg_report_free(r: *mut LawregReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
