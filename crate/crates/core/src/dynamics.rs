//! Exact expected-risk dynamics for SGD, heavy-ball momentum and iterate
//! averaging (EMA) on a diagonal noisy quadratic.
//!
//! Every coordinate evolves independently. Plain SGD is tracked through the
//! scalar second moment `A = E[theta]^2 + V[theta]`, which has a closed form.
//! Momentum and EMA need a three-component linear dynamical system (LDS)
//! `v(t+1) = T v(t) + n` whose first (momentum) or second (EMA) component
//! carries the risk.
//!
//! The closed-form upper bounds on momentum and EMA risk are also provided.
//! They are used only for verification; all trajectories and step counts
//! come from the exact recurrences.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{NqmError, Result};
use crate::spectrum::{check_power, precondition_entry, Entry, InitCondition, Spectrum};

/// Any state component above this is reported as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e300;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Sgd,
    Momentum,
    Ema,
}

impl UpdateRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            UpdateRule::Sgd => "sgd",
            UpdateRule::Momentum => "momentum",
            UpdateRule::Ema => "ema",
        }
    }
}

impl std::str::FromStr for UpdateRule {
    type Err = NqmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(UpdateRule::Sgd),
            "momentum" => Ok(UpdateRule::Momentum),
            "ema" => Ok(UpdateRule::Ema),
            other => Err(NqmError::Parse(format!("unknown optimizer family {other:?}"))),
        }
    }
}

/// One record selects any member of the optimizer family: SGD, momentum
/// (`beta > 0`) or EMA (`gamma > 0`), optionally preconditioned with `H^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub p: f64,
    pub batch_size: f64,
}

impl OptimizerConfig {
    pub fn sgd(alpha: f64, batch_size: f64) -> Self {
        OptimizerConfig {
            alpha,
            beta: 0.0,
            gamma: 0.0,
            p: 0.0,
            batch_size,
        }
    }

    pub fn momentum(alpha: f64, beta: f64, batch_size: f64) -> Self {
        OptimizerConfig {
            beta,
            ..Self::sgd(alpha, batch_size)
        }
    }

    pub fn ema(alpha: f64, gamma: f64, batch_size: f64) -> Self {
        OptimizerConfig {
            gamma,
            ..Self::sgd(alpha, batch_size)
        }
    }

    pub fn with_power(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NqmError::InvalidConfig(msg));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("learning rate must be non-negative, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("averaging coefficient must lie in [0, 1), got {}", self.gamma));
        }
        if self.beta > 0.0 && self.gamma > 0.0 {
            return bad("momentum and averaging cannot be combined in one run".into());
        }
        if check_power(self.p).is_err() {
            return bad(format!("preconditioner power must lie in [0, 1], got {}", self.p));
        }
        if !(self.batch_size.is_finite() && self.batch_size >= 1.0) {
            return bad(format!("batch size must be at least 1, got {}", self.batch_size));
        }
        Ok(())
    }

    /// The update rule this config runs; `beta = gamma = 0` is plain SGD.
    pub fn rule(&self) -> UpdateRule {
        if self.beta > 0.0 {
            UpdateRule::Momentum
        } else if self.gamma > 0.0 {
            UpdateRule::Ema
        } else {
            UpdateRule::Sgd
        }
    }

    /// `alpha / (1 - beta)`.
    pub fn effective_lr(&self) -> f64 {
        self.alpha / (1.0 - self.beta)
    }
}

// ---------------------------------------------------------------------------
// Plain SGD

/// Mean and variance of one SGD coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdMoments {
    pub mean: f64,
    pub variance: f64,
}

impl SgdMoments {
    pub fn from_init(init: &InitCondition) -> Self {
        if init.mean_zero {
            SgdMoments {
                mean: 0.0,
                variance: init.second_moment,
            }
        } else {
            SgdMoments {
                mean: init.second_moment.sqrt(),
                variance: 0.0,
            }
        }
    }

    /// `E[theta]^2 + V[theta]`
    pub fn second_moment(&self) -> f64 {
        self.mean * self.mean + self.variance
    }
}

/// Per-coordinate state of whichever update rule is running.
///
/// The momentum triple is `(A(theta), alpha^2 A(m), -alpha C)` and the EMA
/// triple is `(A(theta), A(theta~)/(1-gamma)^2, C/(1-gamma))`, where `C` is
/// the cross moment of the two tracked variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MomentState {
    Sgd(SgdMoments),
    Momentum(Vec3),
    Ema(Vec3),
}

impl MomentState {
    pub fn initial(rule: UpdateRule, init: &InitCondition, gamma: f64) -> Self {
        match rule {
            UpdateRule::Sgd => MomentState::Sgd(SgdMoments::from_init(init)),
            UpdateRule::Momentum => MomentState::Momentum(momentum_initial_state(init.second_moment)),
            UpdateRule::Ema => MomentState::Ema(ema_initial_state(init.second_moment, gamma)),
        }
    }

    /// Second moment of the iterate whose risk is reported (the averaged
    /// iterate for EMA).
    pub fn risk_moment(&self, gamma: f64) -> f64 {
        match self {
            MomentState::Sgd(m) => m.second_moment(),
            MomentState::Momentum(v) => v[0],
            MomentState::Ema(v) => (1.0 - gamma) * (1.0 - gamma) * v[1],
        }
    }
}

pub fn sgd_moment_step(state: SgdMoments, h: f64, c: f64, alpha: f64, batch_size: f64) -> SgdMoments {
    let r = 1.0 - alpha * h;
    SgdMoments {
        mean: r * state.mean,
        variance: r * r * state.variance + alpha * alpha * c / batch_size,
    }
}

/// Integer power by repeated squaring; deterministic and exact for small `n`.
pub(crate) fn powu(mut base: f64, mut n: u64) -> f64 {
    let mut acc = 1.0;
    while n > 0 {
        if n & 1 == 1 {
            acc *= base;
        }
        base *= base;
        n >>= 1;
    }
    acc
}

/// Contraction data for one SGD coordinate: `A(t) = rho^t A(0) + q G(t)`
/// with `rho = (1 - alpha h)^2`, `q = alpha^2 c / B` and
/// `G(t) = sum_{k<t} rho^k`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SgdContraction {
    /// `ln rho`, or 0 when `rho == 1`.
    pub(crate) ln_rho: f64,
    /// `1 - rho`, computed without cancellation.
    pub(crate) one_minus_rho: f64,
}

impl SgdContraction {
    /// Requires `0 <= alpha h <= 2`.
    pub(crate) fn new(alpha_h: f64) -> Self {
        // distance of |1 - alpha h| from 1
        let m = alpha_h.min(2.0 - alpha_h);
        SgdContraction {
            ln_rho: 2.0 * (-m).ln_1p(),
            one_minus_rho: m * (2.0 - m),
        }
    }

    pub(crate) fn rho_pow(&self, t: u64) -> f64 {
        (self.ln_rho * t as f64).exp()
    }

    pub(crate) fn geometric_sum(&self, t: u64) -> f64 {
        if self.one_minus_rho == 0.0 {
            t as f64
        } else {
            -(self.ln_rho * t as f64).exp_m1() / self.one_minus_rho
        }
    }
}

fn check_sgd_stable(h: f64, alpha: f64) -> Result<()> {
    if alpha * h > 2.0 {
        return Err(NqmError::Unstable { alpha, h, step: None });
    }
    Ok(())
}

/// Expected risk of one coordinate after `t` SGD steps.
pub fn sgd_risk_closed_form(
    h: f64,
    c: f64,
    alpha: f64,
    batch_size: f64,
    t: u64,
    init: &InitCondition,
) -> Result<f64> {
    check_sgd_stable(h, alpha)?;
    let k = SgdContraction::new(alpha * h);
    let q = alpha * alpha * c / batch_size;
    Ok(0.5 * h * (k.rho_pow(t) * init.second_moment + q * k.geometric_sum(t)))
}

/// The `t -> infinity` limit of [`sgd_risk_closed_form`]: `alpha c / (2B(2 - alpha h))`.
pub fn sgd_steady_state_risk(h: f64, c: f64, alpha: f64, batch_size: f64) -> f64 {
    alpha * c / (2.0 * batch_size * (2.0 - alpha * h))
}

// ---------------------------------------------------------------------------
// Linear dynamical systems for momentum and EMA

/// `v(t+1) = transition * v(t) + noise`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lds {
    pub transition: Mat3,
    pub noise: Vec3,
}

/// Transition of `(A(theta), alpha^2 A(m), -alpha C)` under heavy-ball momentum.
pub fn momentum_transition(h: f64, c: f64, alpha: f64, beta: f64, batch_size: f64) -> Lds {
    let ah = alpha * h;
    let r = 1.0 - ah;
    let b2 = beta * beta;
    let q = alpha * alpha * c / batch_size;
    Lds {
        transition: [
            [r * r, b2, 2.0 * r * beta],
            [ah * ah, b2, -2.0 * beta * ah],
            [-r * ah, b2, (1.0 - 2.0 * ah) * beta],
        ],
        noise: [q; 3],
    }
}

/// Transition of `(A(theta), A(theta~)/(1-gamma)^2, C/(1-gamma))` for SGD with
/// an exponential moving average `theta~`.
pub fn ema_transition(h: f64, c: f64, alpha: f64, gamma: f64, batch_size: f64) -> Lds {
    let r = 1.0 - alpha * h;
    let q = alpha * alpha * c / batch_size;
    Lds {
        transition: [
            [r * r, 0.0, 0.0],
            [r * r, gamma * gamma, 2.0 * gamma * r],
            [r * r, 0.0, gamma * r],
        ],
        noise: [q; 3],
    }
}

/// Momentum starts from `m(0) = 0`.
pub fn momentum_initial_state(second_moment: f64) -> Vec3 {
    [second_moment, 0.0, 0.0]
}

/// The average starts at the iterate, `theta~(0) = theta(0)`.
pub fn ema_initial_state(second_moment: f64, gamma: f64) -> Vec3 {
    let s = 1.0 - gamma;
    [second_moment, second_moment / (s * s), second_moment / s]
}

pub(crate) fn mat3_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub(crate) fn solve3(a: &Mat3, b: &Vec3) -> Option<Vec3> {
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let tail: f64 = (i + 1..3).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][3] - tail) / m[i][i];
    }
    Some(x)
}

impl Lds {
    pub fn step(&self, v: &Vec3) -> Vec3 {
        let tv = mat3_vec(&self.transition, v);
        [tv[0] + self.noise[0], tv[1] + self.noise[1], tv[2] + self.noise[2]]
    }

    /// Fixed point `(I - T)^-1 n`, or `None` when `I - T` is singular.
    pub fn steady_state(&self) -> Option<Vec3> {
        let t = &self.transition;
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = if i == j { 1.0 } else { 0.0 } - t[i][j];
            }
        }
        solve3(&a, &self.noise)
    }
}

/// Iterates the system for `steps` steps and returns `steps + 1` states,
/// starting with `state0`.
pub fn lds_simulate(lds: &Lds, state0: Vec3, steps: usize) -> Result<Vec<Vec3>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(state0);
    let mut v = state0;
    for step in 1..=steps {
        v = lds.step(&v);
        if v.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_THRESHOLD) {
            return Err(NqmError::Diverged { step });
        }
        out.push(v);
    }
    Ok(out)
}

/// Roots of `x^2 - sum x + product = 0`, larger (or positive-imaginary) first.
pub fn quadratic_roots(sum: f64, product: f64) -> (Complex64, Complex64) {
    let disc = sum * sum - 4.0 * product;
    if disc >= 0.0 {
        let s = disc.sqrt();
        // avoid cancellation in the smaller-magnitude root
        let big = 0.5 * (sum + sum.signum() * s);
        let small = if big != 0.0 { product / big } else { 0.0 };
        let (r1, r2) = if big >= small { (big, small) } else { (small, big) };
        (Complex64::new(r1, 0.0), Complex64::new(r2, 0.0))
    } else {
        let im = 0.5 * (-disc).sqrt();
        (Complex64::new(0.5 * sum, im), Complex64::new(0.5 * sum, -im))
    }
}

/// Trace and product of the two roots that drive a momentum or EMA
/// coordinate. The LDS eigenvalues are `r1^2`, `r2^2` and `r1 r2`.
pub(crate) fn root_coefficients(rule: UpdateRule, alpha_h: f64, beta: f64, gamma: f64) -> (f64, f64) {
    let r = 1.0 - alpha_h;
    match rule {
        UpdateRule::Sgd => (r, 0.0),
        UpdateRule::Momentum => (r + beta, beta),
        UpdateRule::Ema => (r + gamma, r * gamma),
    }
}

/// Spectral radius of the per-coordinate transition, from the roots of the
/// characteristic polynomial.
pub fn spectral_radius(rule: UpdateRule, alpha_h: f64, beta: f64, gamma: f64) -> f64 {
    let (sum, product) = root_coefficients(rule, alpha_h, beta, gamma);
    let (r1, r2) = quadratic_roots(sum, product);
    r1.norm().max(r2.norm()).powi(2)
}

// ---------------------------------------------------------------------------
// Upper bounds in closed form

/// Quantities of the closed-form momentum/EMA bound at step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormTerms {
    pub r1: Complex64,
    pub r2: Complex64,
    /// Squared factor multiplying the initial risk `(h/2) A(theta(0))`.
    pub convergence_coefficient: f64,
    pub steady_state_risk: f64,
}

const REPEATED_ROOT_NUDGE: f64 = 1e-9;

/// `((r1^(t+1) - r2^(t+1)) - cross (r1^t - r2^t)) / (r1 - r2)`, squared.
fn transient_factor(r1: Complex64, r2: Complex64, cross: f64, t: u64) -> f64 {
    let n = t as i32;
    let num = (r1.powi(n + 1) - r2.powi(n + 1)) - (r1.powi(n) - r2.powi(n)) * cross;
    let val = num / (r1 - r2);
    // imaginary part is rounding residue
    val.re * val.re
}

pub fn momentum_closed_form_terms(
    h: f64,
    c: f64,
    alpha: f64,
    beta: f64,
    batch_size: f64,
    t: u64,
) -> ClosedFormTerms {
    let ah = alpha * h;
    let steady = (1.0 + beta) * alpha * c / (2.0 * batch_size * (2.0 * beta + 2.0 - ah) * (1.0 - beta));
    if beta == 0.0 {
        let r = 1.0 - ah;
        return ClosedFormTerms {
            r1: Complex64::new(r, 0.0),
            r2: Complex64::new(0.0, 0.0),
            convergence_coefficient: powu(r, t).powi(2),
            steady_state_risk: steady,
        };
    }
    let mut b = beta;
    let disc = (1.0 - ah + b).powi(2) - 4.0 * b;
    if disc.abs() < 1e-14 {
        log::warn!("momentum {beta} is critically damped for alpha*h = {ah}; nudging by {REPEATED_ROOT_NUDGE:e} relative");
        b *= 1.0 + REPEATED_ROOT_NUDGE;
    }
    let (r1, r2) = quadratic_roots(1.0 - ah + b, b);
    ClosedFormTerms {
        r1,
        r2,
        convergence_coefficient: transient_factor(r1, r2, b, t),
        steady_state_risk: steady,
    }
}

/// Upper bound on one coordinate's momentum risk after `t` steps.
pub fn momentum_risk_bound(
    h: f64,
    c: f64,
    alpha: f64,
    beta: f64,
    batch_size: f64,
    t: u64,
    init: &InitCondition,
) -> f64 {
    let terms = momentum_closed_form_terms(h, c, alpha, beta, batch_size, t);
    terms.convergence_coefficient * 0.5 * h * init.second_moment + terms.steady_state_risk
}

/// `(1-gamma)(1+r gamma) / ((1+gamma)(1-r gamma))` with `r = 1 - alpha h`;
/// the factor by which averaging shrinks the SGD steady-state risk.
pub fn ema_reduction_factor(alpha_h: f64, gamma: f64) -> f64 {
    let r = 1.0 - alpha_h;
    (1.0 - gamma) * (1.0 + r * gamma) / ((1.0 + gamma) * (1.0 - r * gamma))
}

pub fn ema_closed_form_terms(
    h: f64,
    c: f64,
    alpha: f64,
    gamma: f64,
    batch_size: f64,
    t: u64,
) -> ClosedFormTerms {
    let ah = alpha * h;
    let steady = sgd_steady_state_risk(h, c, alpha, batch_size) * ema_reduction_factor(ah, gamma);
    let r = 1.0 - ah;
    if gamma == 0.0 {
        return ClosedFormTerms {
            r1: Complex64::new(r, 0.0),
            r2: Complex64::new(0.0, 0.0),
            convergence_coefficient: powu(r, t).powi(2),
            steady_state_risk: steady,
        };
    }
    let mut g = gamma;
    if (r - g).abs() < 1e-12 {
        log::warn!("averaging coefficient {gamma} equals 1 - alpha*h; nudging by {REPEATED_ROOT_NUDGE:e} relative");
        g *= 1.0 - REPEATED_ROOT_NUDGE;
    }
    let r1 = Complex64::new(r, 0.0);
    let r2 = Complex64::new(g, 0.0);
    ClosedFormTerms {
        r1,
        r2,
        convergence_coefficient: transient_factor(r1, r2, g * r, t),
        steady_state_risk: steady,
    }
}

/// Upper bound on one coordinate's averaged-iterate risk after `t` steps.
pub fn ema_risk_bound(
    h: f64,
    c: f64,
    alpha: f64,
    gamma: f64,
    batch_size: f64,
    t: u64,
    init: &InitCondition,
) -> f64 {
    let terms = ema_closed_form_terms(h, c, alpha, gamma, batch_size, t);
    terms.convergence_coefficient * 0.5 * h * init.second_moment + terms.steady_state_risk
}

// ---------------------------------------------------------------------------
// Whole-spectrum risk

/// Expected total risk over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTrajectory {
    /// Total risk at `t = 0, 1, ..., T`.
    pub risks: Vec<f64>,
    /// Per-entry risk at the final step, in spectrum order.
    pub per_dim: Option<Vec<f64>>,
}

impl RiskTrajectory {
    pub fn final_risk(&self) -> f64 {
        *self.risks.last().expect("trajectory is never empty")
    }
}

/// An entry paired with what the preconditioned optimizer sees.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedEntry {
    pub weight: f64,
    /// Curvature and noise after preconditioning.
    pub h: f64,
    pub c: f64,
    /// Initial second moment in the preconditioned coordinates,
    /// `h_original^p * A(theta(0))`, so `(h/2) * a0` is the original initial risk.
    pub a0: f64,
}

pub(crate) fn prepare_entries(s: &Spectrum, p: f64, init: &InitCondition) -> Vec<PreparedEntry> {
    s.entries()
        .iter()
        .map(|e: &Entry| {
            let t = precondition_entry(e, p);
            PreparedEntry {
                weight: e.weight,
                h: t.h,
                c: t.c,
                a0: init.second_moment * if p == 0.0 { 1.0 } else { e.h.powf(p) },
            }
        })
        .collect()
}

pub(crate) fn check_entry_stable(config: &OptimizerConfig, e: &PreparedEntry) -> Result<()> {
    let ah = config.alpha * e.h;
    let stable = match config.rule() {
        UpdateRule::Sgd => ah <= 2.0,
        rule => spectral_radius(rule, ah, config.beta, config.gamma) < 1.0,
    };
    if stable {
        Ok(())
    } else {
        Err(NqmError::Unstable {
            alpha: config.alpha,
            h: e.h,
            step: None,
        })
    }
}

/// Total expected risk after `t` steps of the configured optimizer.
///
/// Preconditioning is applied to the spectrum first. SGD coordinates use the
/// closed form; momentum and EMA coordinates use the exact LDS, advanced by
/// repeated squaring of its transition.
pub fn total_risk(s: &Spectrum, config: &OptimizerConfig, t: u64, init: &InitCondition) -> Result<f64> {
    let model = crate::evaluator::RiskModel::new(s, config, init, t)?;
    Ok(model.risk(t))
}

/// Steps every coordinate literally and records total risk at each step.
pub fn risk_trajectory(
    s: &Spectrum,
    config: &OptimizerConfig,
    steps: usize,
    init: &InitCondition,
) -> Result<RiskTrajectory> {
    config.validate()?;
    let entries = prepare_entries(s, config.p, init);
    for e in &entries {
        check_entry_stable(config, e)?;
    }
    let rule = config.rule();
    let mut risks = vec![0.0; steps + 1];
    let mut per_dim = Vec::with_capacity(entries.len());
    for e in &entries {
        let scale = e.weight * 0.5 * e.h;
        let local_init = InitCondition {
            second_moment: e.a0,
            ..*init
        };
        let last = match rule {
            UpdateRule::Sgd => {
                let mut m = SgdMoments::from_init(&local_init);
                risks[0] += scale * m.second_moment();
                for risk in risks.iter_mut().skip(1) {
                    m = sgd_moment_step(m, e.h, e.c, config.alpha, config.batch_size);
                    *risk += scale * m.second_moment();
                }
                m.second_moment()
            }
            UpdateRule::Momentum | UpdateRule::Ema => {
                let (lds, v0, readout) = if rule == UpdateRule::Momentum {
                    (
                        momentum_transition(e.h, e.c, config.alpha, config.beta, config.batch_size),
                        momentum_initial_state(e.a0),
                        MomentState::Momentum as fn(Vec3) -> MomentState,
                    )
                } else {
                    (
                        ema_transition(e.h, e.c, config.alpha, config.gamma, config.batch_size),
                        ema_initial_state(e.a0, config.gamma),
                        MomentState::Ema as fn(Vec3) -> MomentState,
                    )
                };
                let mut v = v0;
                let mut moment = readout(v).risk_moment(config.gamma);
                risks[0] += scale * moment;
                for (step, risk) in risks.iter_mut().enumerate().skip(1) {
                    v = lds.step(&v);
                    if v.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_THRESHOLD) {
                        return Err(NqmError::Diverged { step });
                    }
                    moment = readout(v).risk_moment(config.gamma);
                    *risk += scale * moment;
                }
                moment
            }
        };
        per_dim.push(scale * last);
    }
    Ok(RiskTrajectory {
        risks,
        per_dim: Some(per_dim),
    })
}

/// Total risk as `t -> infinity`, from each coordinate's exact fixed point.
pub fn steady_state_total_risk(s: &Spectrum, config: &OptimizerConfig) -> Result<f64> {
    config.validate()?;
    let init = InitCondition::default();
    let mut total = 0.0;
    for e in prepare_entries(s, config.p, &init) {
        check_entry_stable(config, &e)?;
        total += e.weight * 0.5 * e.h * entry_steady_moment(config, &e);
    }
    Ok(total)
}

/// Limit of the risk-carrying second moment of one coordinate.
pub(crate) fn entry_steady_moment(config: &OptimizerConfig, e: &PreparedEntry) -> f64 {
    let (alpha, b) = (config.alpha, config.batch_size);
    match config.rule() {
        UpdateRule::Sgd => {
            let ah = alpha * e.h;
            if ah == 0.0 {
                // frozen coordinate
                return e.a0;
            }
            if ah >= 2.0 {
                return if e.c > 0.0 { f64::INFINITY } else { e.a0 };
            }
            alpha * alpha * e.c / (b * ah * (2.0 - ah))
        }
        UpdateRule::Momentum => momentum_transition(e.h, e.c, alpha, config.beta, b)
            .steady_state()
            .map_or(f64::INFINITY, |v| v[0]),
        UpdateRule::Ema => {
            let g = 1.0 - config.gamma;
            ema_transition(e.h, e.c, alpha, config.gamma, b)
                .steady_state()
                .map_or(f64::INFINITY, |v| g * g * v[1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const UNIT: InitCondition = InitCondition {
        second_moment: 1.0,
        mean_zero: true,
    };

    #[test]
    fn sgd_step_examples() {
        let s = sgd_moment_step(SgdMoments { mean: 0.0, variance: 1.0 }, 1.0, 1.0, 0.5, 1.0);
        assert_eq!(s, SgdMoments { mean: 0.0, variance: 0.5 });

        let s0 = SgdMoments { mean: 0.3, variance: 0.7 };
        assert_eq!(sgd_moment_step(s0, 2.0, 1.0, 0.0, 4.0), s0);

        let s = sgd_moment_step(SgdMoments { mean: 1.0, variance: 0.0 }, 1.0, 0.0, 1.0, 1.0);
        assert_eq!(s, SgdMoments { mean: 0.0, variance: 0.0 });
    }

    #[test]
    fn sgd_closed_form_examples() {
        assert_eq!(sgd_risk_closed_form(0.3, 1.0, 0.5, 1.0, 0, &UNIT).unwrap(), 0.15);
        // one step from (0, 1): variance 0.5, risk 0.25
        assert_relative_eq!(
            sgd_risk_closed_form(1.0, 1.0, 0.5, 1.0, 1, &UNIT).unwrap(),
            0.25,
            max_relative = 1e-15
        );
        // steady state alpha c / (2B(2 - alpha h)) = 0.5 / 3
        assert_relative_eq!(
            sgd_risk_closed_form(1.0, 1.0, 0.5, 1.0, 10_000, &UNIT).unwrap(),
            1.0 / 6.0,
            max_relative = 1e-12
        );
        assert!(matches!(
            sgd_risk_closed_form(1.0, 1.0, 2.1, 1.0, 3, &UNIT),
            Err(NqmError::Unstable { .. })
        ));
        // alpha h = 2 is allowed: the coordinate never contracts
        let at_edge = sgd_risk_closed_form(1.0, 1.0, 2.0, 1.0, 3, &UNIT).unwrap();
        assert_relative_eq!(at_edge, 0.5 * (1.0 + 3.0 * 4.0), max_relative = 1e-14);
    }

    #[test]
    fn momentum_transition_reduces_to_sgd() {
        let lds = momentum_transition(0.7, 1.3, 0.4, 0.0, 2.0);
        assert_eq!(lds.transition[0], [(1.0 - 0.28f64).powi(2), 0.0, 0.0]);
        let far = momentum_transition(0.7, 1.3, 0.4, 0.5, 1e300);
        assert!(far.noise.iter().all(|&x| x < 1e-299));
    }

    /// Characteristic polynomial of a 3x3 matrix evaluated at `lambda`.
    fn char_poly(m: &Mat3, lambda: f64) -> f64 {
        let a = |i: usize, j: usize| m[i][j] - if i == j { lambda } else { 0.0 };
        a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
            + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
    }

    #[test]
    fn critical_damping_gives_triple_eigenvalue() {
        let lds = momentum_transition(1.0, 1.0, 0.01, 0.81, 1.0);
        // factored form (lambda - beta)(lambda^2 - (beta^2 - 2 alpha h beta + (1 - alpha h)^2) lambda + beta^2)
        let b: f64 = 0.81;
        let ah: f64 = 0.01;
        let factored = |l: f64| -(l - b) * (l * l - (b * b - 2.0 * ah * b + (1.0 - ah).powi(2)) * l + b * b);
        for l in [0.0, 0.3, 0.81, 1.2] {
            assert_relative_eq!(char_poly(&lds.transition, l), factored(l), epsilon = 1e-12);
        }
        // triple root at 0.81: polynomial and its first two derivatives vanish
        let d = 1e-4;
        let p = |l| char_poly(&lds.transition, l);
        assert!(p(0.81).abs() < 1e-14);
        assert!(((p(0.81 + d) - p(0.81 - d)) / (2.0 * d)).abs() < 1e-7);
        assert!(((p(0.81 + d) - 2.0 * p(0.81) + p(0.81 - d)) / (d * d)).abs() < 1e-5);
        assert_relative_eq!(spectral_radius(UpdateRule::Momentum, 0.01, 0.81, 0.0), 0.81, max_relative = 1e-12);
    }

    #[test]
    fn lds_identity_and_sgd_equivalence() {
        let id = Lds {
            transition: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            noise: [0.0; 3],
        };
        let traj = lds_simulate(&id, [1.0, 2.0, 3.0], 5).unwrap();
        assert!(traj.iter().all(|v| *v == [1.0, 2.0, 3.0]));

        let (h, c, a, b) = (0.8, 0.6, 0.9, 3.0);
        let lds = momentum_transition(h, c, a, 0.0, b);
        let traj = lds_simulate(&lds, [1.0, 0.0, 0.0], 200).unwrap();
        let mut m = SgdMoments { mean: 0.0, variance: 1.0 };
        for v in &traj[1..] {
            m = sgd_moment_step(m, h, c, a, b);
            assert_relative_eq!(v[0], m.second_moment(), max_relative = 1e-12);
        }
    }

    #[test]
    fn lds_reaches_fixed_point() {
        let lds = momentum_transition(1.0, 1.0, 0.3, 0.6, 4.0);
        let star = lds.steady_state().unwrap();
        let radius = spectral_radius(UpdateRule::Momentum, 0.3, 0.6, 0.0);
        let horizon = (1e-14f64.ln() / radius.ln()).ceil() as usize + 50;
        let traj = lds_simulate(&lds, [1.0, 0.0, 0.0], horizon).unwrap();
        let last = traj.last().unwrap();
        for i in 0..3 {
            assert!((last[i] - star[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn lds_flags_divergence() {
        let lds = momentum_transition(1.0, 1.0, 4.0, 0.5, 1.0);
        assert!(matches!(
            lds_simulate(&lds, [1.0, 0.0, 0.0], 100_000),
            Err(NqmError::Diverged { .. })
        ));
    }

    #[test]
    fn momentum_bound_examples() {
        // beta = 0 is exactly the SGD closed form
        for t in [0, 1, 7, 100] {
            let bound = momentum_risk_bound(0.9, 1.1, 0.7, 0.0, 3.0, t, &UNIT);
            let sgd_transient = (1.0 - 0.63f64).powi(2 * t as i32) * 0.45;
            assert_relative_eq!(
                bound,
                sgd_transient + sgd_steady_state_risk(0.9, 1.1, 0.7, 3.0),
                max_relative = 1e-13
            );
        }

        let terms = momentum_closed_form_terms(1.0, 1.0, 0.0005, 0.9, 1.0, 0);
        assert_relative_eq!(terms.steady_state_risk, 1.9 * 0.0005 / (2.0 * 3.7995 * 0.1), max_relative = 1e-12);
        assert_relative_eq!(terms.steady_state_risk, 1.2502e-3, max_relative = 1e-4);
        // against the exact fixed point of the LDS
        let star = momentum_transition(1.0, 1.0, 0.0005, 0.9, 1.0).steady_state().unwrap();
        assert_relative_eq!(terms.steady_state_risk, 0.5 * star[0], max_relative = 1e-9);
        // effective learning rate 0.005 under plain SGD
        let sgd = sgd_steady_state_risk(1.0, 1.0, 0.005, 1.0);
        assert_relative_eq!(sgd, 1.2531e-3, max_relative = 1e-4);
        assert!((terms.steady_state_risk - sgd).abs() / sgd < 0.003);

        // slow root close to 1 - alpha h / (1 - beta)
        assert!(terms.r1.im == 0.0);
        assert!((terms.r1.re - 0.99475).abs() < 5e-5);
        assert!((terms.r1.re - 0.995).abs() < 1e-3);
    }

    #[test]
    fn ema_transition_examples() {
        // gamma = 0: the average is the iterate
        let lds = ema_transition(1.0, 1.0, 0.3, 0.0, 2.0);
        let traj = lds_simulate(&lds, ema_initial_state(1.0, 0.0), 50).unwrap();
        for v in &traj {
            assert_relative_eq!(v[0], v[1], max_relative = 1e-15);
        }
        // frozen iterate: the average converges to it
        let lds = ema_transition(1.0, 0.0, 0.0, 0.9, 2.0);
        let traj = lds_simulate(&lds, ema_initial_state(2.5, 0.9), 2000).unwrap();
        let last = MomentState::Ema(*traj.last().unwrap()).risk_moment(0.9);
        assert_relative_eq!(last, 2.5, max_relative = 1e-12);
    }

    #[test]
    fn ema_fixed_point_matches_closed_form() {
        for &(h, a, g, b) in &[(1.0, 0.1, 0.5, 1.0), (0.3, 0.7, 0.9, 8.0), (2.0, 0.95, 0.2, 3.0)] {
            let star = ema_transition(h, 1.3, a, g, b).steady_state().unwrap();
            let risk = 0.5 * h * (1.0 - g) * (1.0 - g) * star[1];
            let terms = ema_closed_form_terms(h, 1.3, a, g, b, 0);
            assert_relative_eq!(risk, terms.steady_state_risk, max_relative = 1e-10);
        }
    }

    #[test]
    fn ema_reduction_examples() {
        assert_eq!(ema_reduction_factor(0.3, 0.0), 1.0);
        assert_relative_eq!(ema_reduction_factor(0.1, 0.5), (0.5 * 1.45) / (1.5 * 0.55), max_relative = 1e-14);
        assert_relative_eq!(ema_reduction_factor(0.1, 0.5), 0.878_787_878_8, max_relative = 1e-9);
        assert_relative_eq!(ema_reduction_factor(0.1, 0.9), 0.501_385_041_55, max_relative = 1e-9);
        for t in [0, 3, 40] {
            // (1 - alpha h)^(2t) (h/2) A(0) plus the plain SGD floor
            assert_relative_eq!(
                ema_risk_bound(0.5, 1.0, 0.4, 0.0, 2.0, t, &UNIT),
                powu(0.8, t).powi(2) * 0.25 + sgd_steady_state_risk(0.5, 1.0, 0.4, 2.0),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn repeated_roots_are_nudged() {
        // beta = (1 - sqrt(alpha h))^2
        let b = momentum_risk_bound(1.0, 1.0, 0.01, 0.81, 1.0, 30, &UNIT);
        let exact = lds_simulate(&momentum_transition(1.0, 1.0, 0.01, 0.81, 1.0), [1.0, 0.0, 0.0], 30).unwrap();
        assert!(b.is_finite());
        assert!(0.5 * exact[30][0] <= b + 1e-9);
        // gamma = 1 - alpha h
        let b = ema_risk_bound(1.0, 1.0, 0.2, 0.8, 1.0, 30, &UNIT);
        assert!(b.is_finite());
    }

    #[test]
    fn total_risk_examples() {
        let s = Spectrum::power(4, true).unwrap();
        let r0 = total_risk(&s, &OptimizerConfig::sgd(0.3, 1.0), 0, &UNIT).unwrap();
        assert_relative_eq!(r0, (1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 2.0, max_relative = 1e-15);
        assert_relative_eq!(r0, 1.041_666_666_666_7, max_relative = 1e-12);

        let big = Spectrum::power(10_000, true).unwrap();
        let init_risk: f64 = big.entries().iter().map(|e| e.h / 2.0).sum();
        for t in [0, 10, 100_000] {
            let r = total_risk(&big, &OptimizerConfig::sgd(0.0, 1.0), t, &UNIT).unwrap();
            assert_relative_eq!(r, init_risk, max_relative = 1e-12);
        }
    }

    #[test]
    fn preconditioning_keeps_initial_risk() {
        let s = Spectrum::power(20, true).unwrap();
        let base: f64 = s.entries().iter().map(|e| e.h / 2.0).sum();
        for p in [0.0, 0.5, 1.0] {
            let cfg = OptimizerConfig::sgd(0.1, 4.0).with_power(p);
            let traj = risk_trajectory(&s, &cfg, 3, &UNIT).unwrap();
            assert_relative_eq!(traj.risks[0], base, max_relative = 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd(0.1, 1.0).validate().is_ok());
        assert!(OptimizerConfig::sgd(-0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0.5).validate().is_err());
        assert!(OptimizerConfig::momentum(0.1, 1.0, 1.0).validate().is_err());
        let both = OptimizerConfig { gamma: 0.5, ..OptimizerConfig::momentum(0.1, 0.5, 1.0) };
        assert!(both.validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0).with_power(1.5).validate().is_err());
        assert_eq!(OptimizerConfig::momentum(0.1, 0.0, 1.0).rule(), UpdateRule::Sgd);
        assert_relative_eq!(OptimizerConfig::momentum(0.1, 0.9, 1.0).effective_lr(), 1.0, max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn closed_form_matches_recurrence(
            h in 1e-3f64..10.0,
            c in 0.0f64..5.0,
            frac in 0.0f64..1.0,
            b in 1.0f64..1024.0,
            t in 0u64..2000,
        ) {
            let alpha = frac * 2.0 / h;
            let closed = sgd_risk_closed_form(h, c, alpha, b, t, &UNIT).unwrap();
            let mut m = SgdMoments { mean: 0.0, variance: 1.0 };
            for _ in 0..t {
                m = sgd_moment_step(m, h, c, alpha, b);
            }
            let rec = 0.5 * h * m.second_moment();
            prop_assert!((closed - rec).abs() <= 1e-10 * rec.abs().max(1e-300));
        }

        #[test]
        fn root_identities(ah in 1e-4f64..3.0, beta in 0.0f64..0.999) {
            let (r1, r2) = quadratic_roots(1.0 - ah + beta, beta);
            prop_assert!(((r1 + r2).re - (1.0 - ah + beta)).abs() < 1e-12);
            prop_assert!(((r1 * r2).re - beta).abs() < 1e-12);
            prop_assert!((r1 * r2).im.abs() < 1e-12);
            if beta > (1.0 - ah.sqrt()).powi(2) {
                prop_assert!((r1.norm() - beta.sqrt()).abs() < 1e-12);
                prop_assert!((r2.norm() - beta.sqrt()).abs() < 1e-12);
            }
        }

        #[test]
        fn steady_state_scales_inverse_batch(ah in 1e-3f64..1.5, beta in 0.0f64..0.99, b in 1.0f64..1e4) {
            let one = momentum_transition(1.0, 1.0, ah, beta, 1.0).steady_state().unwrap();
            let many = momentum_transition(1.0, 1.0, ah, beta, b).steady_state().unwrap();
            prop_assert!((one[0] / b - many[0]).abs() <= 1e-9 * many[0]);
        }
    }
}
