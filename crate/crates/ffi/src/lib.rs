//! C ABI over the `nqm` library.
//!
//! Every fallible function returns an [`NqmStatus`]; on failure a message is
//! available from [`nqm_last_error`] on the same thread. Handles are opaque
//! and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nqm::dynamics::{risk_trajectory, steady_state_total_risk, total_risk};
use nqm::tuning::{grid_search, steps_to_target, Grids, SearchOptions};
use nqm::{Entry, Family, InitCondition, NqmError, OptimizerConfig, Spectrum, Steps, UpdateRule};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NqmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Unstable = 3,
    Unreachable = 4,
    Io = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NqmRule {
    Sgd = 0,
    Momentum = 1,
    Ema = 2,
}

impl From<NqmRule> for UpdateRule {
    fn from(r: NqmRule) -> Self {
        match r {
            NqmRule::Sgd => UpdateRule::Sgd,
            NqmRule::Momentum => UpdateRule::Momentum,
            NqmRule::Ema => UpdateRule::Ema,
        }
    }
}

/// Opaque spectrum handle.
pub struct NqmSpectrum(Spectrum);

/// Opaque optimizer configuration handle.
pub struct NqmOptimizer(OptimizerConfig);

/// Result of a hyperparameter search.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NqmTuneResult {
    pub alpha: f64,
    /// Momentum or averaging coefficient of the winner; 0 for SGD.
    pub coef: f64,
    pub effective_lr: f64,
    /// Steps to target; meaningful only when `reached` is nonzero.
    pub steps: u64,
    pub reached: i32,
    pub frontier_flag: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &NqmError) -> NqmStatus {
    match e {
        NqmError::Unstable { .. } | NqmError::Diverged { .. } => NqmStatus::Unstable,
        NqmError::Unreachable { .. } => NqmStatus::Unreachable,
        NqmError::Io(_) => NqmStatus::Io,
        _ => NqmStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic.
fn guard<F: FnOnce() -> Result<(), (NqmStatus, String)>>(f: F) -> NqmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NqmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NqmStatus::Internal
        }
    }
}

fn lib<T>(r: nqm::Result<T>) -> Result<T, (NqmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(name: &str) -> (NqmStatus, String) {
    (NqmStatus::NullPointer, format!("{name} is null"))
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, (NqmStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (NqmStatus, String)> {
    p.as_mut().ok_or_else(|| null(name))
}

fn init(second_moment: f64) -> Result<InitCondition, (NqmStatus, String)> {
    lib(InitCondition::new(second_moment))
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nqm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nqm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Power-law spectrum `h_i = 1/i`, `i = 1..=d`, with `c_i = h_i`.
///
/// # Safety
/// `out_spectrum` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nqm_spectrum_power(d: usize, out_spectrum: *mut *mut NqmSpectrum) -> NqmStatus {
    guard(|| {
        let slot = out(out_spectrum, "out_spectrum")?;
        let s = lib(Spectrum::power(d, true))?;
        *slot = Box::into_raw(Box::new(NqmSpectrum(s)));
        Ok(())
    })
}

/// Spectrum from `n` curvature, noise and weight triples. `weights` may be
/// null for unit weights.
///
/// # Safety
/// `h` and `c` must point to `n` values; `weights` to `n` values or null.
#[no_mangle]
pub unsafe extern "C" fn nqm_spectrum_new(
    h: *const f64,
    c: *const f64,
    weights: *const f64,
    n: usize,
    out_spectrum: *mut *mut NqmSpectrum,
) -> NqmStatus {
    guard(|| {
        let slot = out(out_spectrum, "out_spectrum")?;
        if h.is_null() {
            return Err(null("h"));
        }
        if c.is_null() {
            return Err(null("c"));
        }
        let h = std::slice::from_raw_parts(h, n);
        let c = std::slice::from_raw_parts(c, n);
        let w = (!weights.is_null()).then(|| std::slice::from_raw_parts(weights, n));
        let entries = (0..n)
            .map(|i| Entry::new(h[i], c[i], w.map_or(1.0, |w| w[i])))
            .collect();
        let s = lib(Spectrum::new(entries))?;
        *slot = Box::into_raw(Box::new(NqmSpectrum(s)));
        Ok(())
    })
}

/// Spectrum read from a JSON file or a `power:d=N` shorthand.
///
/// # Safety
/// `source` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nqm_spectrum_load(source: *const c_char, out_spectrum: *mut *mut NqmSpectrum) -> NqmStatus {
    guard(|| {
        let slot = out(out_spectrum, "out_spectrum")?;
        if source.is_null() {
            return Err(null("source"));
        }
        let text = CStr::from_ptr(source)
            .to_str()
            .map_err(|_| (NqmStatus::InvalidArgument, "source is not UTF-8".to_string()))?;
        let spec: nqm::SpectrumSpec = lib(text.parse())?;
        let s = lib(spec.load())?;
        *slot = Box::into_raw(Box::new(NqmSpectrum(s)));
        Ok(())
    })
}

/// New spectrum with curvatures merged into `bins` log-spaced bins.
///
/// # Safety
/// `spectrum` must be a live handle and `out_spectrum` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nqm_spectrum_quantize(
    spectrum: *const NqmSpectrum,
    bins: usize,
    out_spectrum: *mut *mut NqmSpectrum,
) -> NqmStatus {
    guard(|| {
        let s = deref(spectrum, "spectrum")?;
        let slot = out(out_spectrum, "out_spectrum")?;
        let q = lib(s.0.quantize(bins))?;
        *slot = Box::into_raw(Box::new(NqmSpectrum(q)));
        Ok(())
    })
}

/// Number of entries, or 0 for a null handle.
///
/// # Safety
/// `spectrum` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn nqm_spectrum_len(spectrum: *const NqmSpectrum) -> usize {
    spectrum.as_ref().map_or(0, |s| s.0.len())
}

/// Total weight, i.e. the effective dimension; NaN for a null handle.
///
/// # Safety
/// `spectrum` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn nqm_spectrum_dimension(spectrum: *const NqmSpectrum) -> f64 {
    spectrum.as_ref().map_or(f64::NAN, |s| s.0.d_effective())
}

/// # Safety
/// `spectrum` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nqm_spectrum_free(spectrum: *mut NqmSpectrum) {
    if !spectrum.is_null() {
        drop(Box::from_raw(spectrum));
    }
}

/// Optimizer configuration. `coef` is the momentum coefficient for
/// `Momentum`, the averaging coefficient for `Ema`, and must be 0 for `Sgd`.
/// `p` is the preconditioner power.
///
/// # Safety
/// `out_optimizer` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nqm_optimizer_new(
    rule: NqmRule,
    alpha: f64,
    coef: f64,
    batch_size: f64,
    p: f64,
    out_optimizer: *mut *mut NqmOptimizer,
) -> NqmStatus {
    guard(|| {
        let slot = out(out_optimizer, "out_optimizer")?;
        let cfg = match rule {
            NqmRule::Sgd if coef != 0.0 => {
                return Err((NqmStatus::InvalidArgument, format!("sgd takes no coefficient, got {coef}")))
            }
            NqmRule::Sgd => OptimizerConfig::sgd(alpha, batch_size),
            NqmRule::Momentum => OptimizerConfig::momentum(alpha, coef, batch_size),
            NqmRule::Ema => OptimizerConfig::ema(alpha, coef, batch_size),
        }
        .with_power(p);
        lib(cfg.validate())?;
        *slot = Box::into_raw(Box::new(NqmOptimizer(cfg)));
        Ok(())
    })
}

/// # Safety
/// `optimizer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nqm_optimizer_free(optimizer: *mut NqmOptimizer) {
    if !optimizer.is_null() {
        drop(Box::from_raw(optimizer));
    }
}

/// Exact expected risk after `t` steps from `theta_0` with per-coordinate
/// second moment `init_second_moment`.
///
/// # Safety
/// Handles must be live and `out_risk` valid.
#[no_mangle]
pub unsafe extern "C" fn nqm_risk(
    spectrum: *const NqmSpectrum,
    optimizer: *const NqmOptimizer,
    t: u64,
    init_second_moment: f64,
    out_risk: *mut f64,
) -> NqmStatus {
    guard(|| {
        let s = deref(spectrum, "spectrum")?;
        let o = deref(optimizer, "optimizer")?;
        let slot = out(out_risk, "out_risk")?;
        *slot = lib(total_risk(&s.0, &o.0, t, &init(init_second_moment)?))?;
        Ok(())
    })
}

/// Writes the exact risk at steps `0..len` into `out_risks`.
///
/// # Safety
/// Handles must be live and `out_risks` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn nqm_risk_trajectory(
    spectrum: *const NqmSpectrum,
    optimizer: *const NqmOptimizer,
    init_second_moment: f64,
    out_risks: *mut f64,
    len: usize,
) -> NqmStatus {
    guard(|| {
        let s = deref(spectrum, "spectrum")?;
        let o = deref(optimizer, "optimizer")?;
        if out_risks.is_null() {
            return Err(null("out_risks"));
        }
        if len == 0 {
            return Ok(());
        }
        let traj = lib(risk_trajectory(&s.0, &o.0, len - 1, &init(init_second_moment)?))?;
        std::slice::from_raw_parts_mut(out_risks, len).copy_from_slice(&traj.risks[..len]);
        Ok(())
    })
}

/// Limiting risk as the step count grows.
///
/// # Safety
/// Handles must be live and `out_risk` valid.
#[no_mangle]
pub unsafe extern "C" fn nqm_steady_state_risk(
    spectrum: *const NqmSpectrum,
    optimizer: *const NqmOptimizer,
    out_risk: *mut f64,
) -> NqmStatus {
    guard(|| {
        let s = deref(spectrum, "spectrum")?;
        let o = deref(optimizer, "optimizer")?;
        let slot = out(out_risk, "out_risk")?;
        *slot = lib(steady_state_total_risk(&s.0, &o.0))?;
        Ok(())
    })
}

/// First step at which the risk is at or below `target`, searching up to
/// `cap` steps. Returns `Unreachable` when the target is never met.
///
/// # Safety
/// Handles must be live and `out_steps` valid.
#[no_mangle]
pub unsafe extern "C" fn nqm_steps_to_target(
    spectrum: *const NqmSpectrum,
    optimizer: *const NqmOptimizer,
    target: f64,
    cap: u64,
    init_second_moment: f64,
    out_steps: *mut u64,
) -> NqmStatus {
    guard(|| {
        let s = deref(spectrum, "spectrum")?;
        let o = deref(optimizer, "optimizer")?;
        let slot = out(out_steps, "out_steps")?;
        match lib(steps_to_target(&s.0, &o.0, target, cap, &init(init_second_moment)?))? {
            Steps::Reached(t) => {
                *slot = t;
                Ok(())
            }
            Steps::Unreachable(u) => Err((NqmStatus::Unreachable, format!("target {target} is unreachable: {u:?}"))),
        }
    })
}

/// Tunes learning rate and coefficient on the default grids for one
/// family and batch size. An unreached target is reported through
/// `reached = 0`, not through the status.
///
/// # Safety
/// `spectrum` must be live and `out_result` valid.
#[no_mangle]
pub unsafe extern "C" fn nqm_tune(
    spectrum: *const NqmSpectrum,
    rule: NqmRule,
    p: f64,
    batch_size: f64,
    target: f64,
    cap: u64,
    out_result: *mut NqmTuneResult,
) -> NqmStatus {
    guard(|| {
        let s = deref(spectrum, "spectrum")?;
        let slot = out(out_result, "out_result")?;
        let family = lib(Family::new(rule.into(), p))?;
        let grids = lib(Grids::default_for(&s.0, p))?;
        let opts = SearchOptions {
            cap,
            ..Default::default()
        };
        let r = lib(grid_search(&s.0, batch_size, target, family, &grids, &opts))?;
        *slot = NqmTuneResult {
            alpha: r.best_config.alpha,
            coef: r.best_config.beta + r.best_config.gamma,
            effective_lr: r.effective_lr,
            steps: r.steps.reached().unwrap_or(0),
            reached: r.steps.is_reached() as i32,
            frontier_flag: r.frontier_flag as i32,
        };
        Ok(())
    })
}
