//! Piecewise-constant learning-rate schedules for SGD: exact risk, its
//! gradient with respect to the piece log learning rates, and optimization.

use serde::{Deserialize, Serialize};

use crate::bfgs::{self, BfgsOptions};
use crate::dynamics::{prepare_entries, sgd_moment_step, PreparedEntry, RiskTrajectory, SgdContraction, SgdMoments};
use crate::error::{NqmError, Result};
use crate::spectrum::{InitCondition, Spectrum};
use crate::tuning::DEFAULT_STEP_CAP;

/// Relative slack when comparing a learning rate against `2/h1`.
const EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub alpha: f64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub pieces: Vec<Piece>,
}

impl Schedule {
    pub fn new(pieces: Vec<Piece>) -> Result<Self> {
        for (k, p) in pieces.iter().enumerate() {
            if !(p.alpha > 0.0 && p.alpha.is_finite()) {
                return Err(NqmError::InvalidArgument(format!(
                    "piece {k}: learning rate must be positive, got {}",
                    p.alpha
                )));
            }
            if p.len == 0 {
                return Err(NqmError::InvalidArgument(format!("piece {k} has zero length")));
            }
        }
        Ok(Schedule { pieces })
    }

    pub fn constant(alpha: f64, steps: u64) -> Result<Self> {
        Schedule::new(vec![Piece { alpha, len: steps }])
    }

    /// `n` pieces of length `steps / n`, the remainder going to the last one.
    pub fn equal_lengths(steps: u64, n: usize) -> Result<Vec<u64>> {
        if n == 0 || (n as u64) > steps {
            return Err(NqmError::InvalidArgument(format!(
                "cannot split {steps} steps into {n} non-empty pieces"
            )));
        }
        let base = steps / n as u64;
        let mut lens = vec![base; n];
        lens[n - 1] += steps - base * n as u64;
        Ok(lens)
    }

    pub fn from_parts(alphas: &[f64], lens: &[u64]) -> Result<Self> {
        if alphas.len() != lens.len() {
            return Err(NqmError::InvalidArgument("alphas and lengths differ in size".into()));
        }
        Schedule::new(
            alphas
                .iter()
                .zip(lens)
                .map(|(&alpha, &len)| Piece { alpha, len })
                .collect(),
        )
    }

    pub fn total_steps(&self) -> u64 {
        self.pieces.iter().map(|p| p.len).sum()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.pieces.iter().map(|p| p.alpha).collect()
    }

    pub fn lens(&self) -> Vec<u64> {
        self.pieces.iter().map(|p| p.len).collect()
    }

    /// Learning rate used at step `t` (0-based), if within the schedule.
    pub fn alpha_at(&self, t: u64) -> Option<f64> {
        let mut start = 0;
        for p in &self.pieces {
            if t < start + p.len {
                return Some(p.alpha);
            }
            start += p.len;
        }
        None
    }

    /// Rejects any piece whose learning rate exceeds `2/h_max`; the error
    /// names the first step of the piece.
    pub fn check_stable(&self, s: &Spectrum) -> Result<()> {
        let h = s.h_max();
        let mut start = 0usize;
        for p in &self.pieces {
            if p.alpha * h > 2.0 * (1.0 + EDGE_TOL) {
                return Err(NqmError::Unstable {
                    alpha: p.alpha,
                    h,
                    step: Some(start),
                });
            }
            start += p.len as usize;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Schedule = serde_json::from_str(text)?;
        Schedule::new(raw.pieces)
    }

    /// One `(step, alpha)` row per step.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "alpha"])?;
        let mut t = 0u64;
        for p in &self.pieces {
            let a = p.alpha.to_string();
            for _ in 0..p.len {
                w.write_record([t.to_string().as_str(), a.as_str()])?;
                t += 1;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Total risk after every step of `sched`, stepping each coordinate's
/// second-moment recurrence with the scheduled learning rate.
pub fn dp_risk(s: &Spectrum, sched: &Schedule, batch_size: f64, init: &InitCondition) -> Result<RiskTrajectory> {
    check_batch(batch_size)?;
    sched.check_stable(s)?;
    let steps = sched.total_steps() as usize;
    let mut risks = vec![0.0; steps + 1];
    let mut per_dim = Vec::with_capacity(s.len());
    for e in prepare_entries(s, 0.0, init) {
        let scale = e.weight * 0.5 * e.h;
        let mut m = SgdMoments::from_init(&InitCondition {
            second_moment: e.a0,
            ..*init
        });
        risks[0] += scale * m.second_moment();
        let mut t = 1;
        for p in &sched.pieces {
            for _ in 0..p.len {
                m = sgd_moment_step(m, e.h, e.c, p.alpha, batch_size);
                risks[t] += scale * m.second_moment();
                t += 1;
            }
        }
        per_dim.push(scale * m.second_moment());
    }
    Ok(RiskTrajectory {
        risks,
        per_dim: Some(per_dim),
    })
}

fn check_batch(batch_size: f64) -> Result<()> {
    if !(batch_size >= 1.0 && batch_size.is_finite()) {
        return Err(NqmError::InvalidArgument(format!("batch size must be at least 1, got {batch_size}")));
    }
    Ok(())
}

/// `f(y) = (1 - e^-y) / y` and its derivative.
fn f_and_df(y: f64) -> (f64, f64) {
    if y == 0.0 {
        return (1.0, -0.5);
    }
    let f = -(-y).exp_m1() / y;
    let df = if y < 0.5 {
        // sum_{n>=1} (-1)^n n y^(n-1) / (n+1)!
        let mut sum = 0.0;
        let mut pow = 1.0;
        let mut fact = 2.0;
        for n in 1..=20 {
            let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
            sum += sign * n as f64 * pow / fact;
            pow *= y;
            fact *= (n + 2) as f64;
        }
        sum
    } else {
        ((-y).exp() * (1.0 + y) - 1.0) / (y * y)
    };
    (f, df)
}

/// One coordinate over one piece: `A' = P A + q G` plus the partial
/// derivatives of `P` and `q G` with respect to alpha.
struct PieceTerms {
    p: f64,
    qg: f64,
    dp: f64,
    dqg: f64,
}

fn piece_terms(e: &PreparedEntry, alpha: f64, len: u64, batch_size: f64) -> PieceTerms {
    let ah = alpha * e.h;
    let k = SgdContraction::new(ah);
    let l = len as f64;
    let rho = (1.0 - ah) * (1.0 - ah);
    let p = k.rho_pow(len);
    let rho_lm1 = if len == 1 { 1.0 } else { k.rho_pow(len - 1) };
    let drho = -2.0 * e.h * (1.0 - ah);
    let dp = l * rho_lm1 * drho;
    let g = k.geometric_sum(len);
    let dg_drho = if len == 1 {
        0.0
    } else if rho <= 0.5 {
        (1.0 - l * rho_lm1 + (l - 1.0) * p) / (k.one_minus_rho * k.one_minus_rho)
    } else {
        let x = -k.ln_rho;
        let (fx, dfx) = f_and_df(x);
        let (flx, dflx) = f_and_df(l * x);
        let dg_dx = l * (l * dflx * fx - flx * dfx) / (fx * fx);
        -dg_dx / rho
    };
    let q = alpha * alpha * e.c / batch_size;
    let dq = 2.0 * alpha * e.c / batch_size;
    PieceTerms {
        p,
        qg: q * g,
        dp,
        dqg: dq * g + q * dg_drho * drho,
    }
}

/// Final risk and its derivative with respect to each piece's alpha.
fn final_risk_and_alpha_grad(
    entries: &[PreparedEntry],
    alphas: &[f64],
    lens: &[u64],
    batch_size: f64,
) -> (f64, Vec<f64>) {
    let n = alphas.len();
    let mut grad = vec![0.0; n];
    let mut risk = 0.0;
    let mut terms = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n + 1);
    for e in entries {
        terms.clear();
        states.clear();
        let mut a = e.a0;
        states.push(a);
        for (&alpha, &len) in alphas.iter().zip(lens) {
            let t = piece_terms(e, alpha, len, batch_size);
            a = t.p * a + t.qg;
            states.push(a);
            terms.push(t);
        }
        let scale = e.weight * 0.5 * e.h;
        risk += scale * a;
        let mut adj = scale;
        for k in (0..n).rev() {
            let t = &terms[k];
            grad[k] += adj * (t.dp * states[k] + t.dqg);
            adj *= t.p;
        }
    }
    (risk, grad)
}

/// Risk after the last step of `sched`, from per-piece closed forms.
pub fn final_risk(s: &Spectrum, sched: &Schedule, batch_size: f64, init: &InitCondition) -> Result<f64> {
    check_batch(batch_size)?;
    sched.check_stable(s)?;
    let entries = prepare_entries(s, 0.0, init);
    Ok(final_risk_and_alpha_grad(&entries, &sched.alphas(), &sched.lens(), batch_size).0)
}

/// Derivative of the final risk with respect to each piece's `ln alpha`,
/// by reverse accumulation through the per-piece recurrence.
///
/// A piece sitting at `alpha = 2/h_max` whose derivative asks for a larger
/// learning rate reports 0 (projected gradient).
pub fn risk_gradient(s: &Spectrum, sched: &Schedule, batch_size: f64, init: &InitCondition) -> Result<Vec<f64>> {
    check_batch(batch_size)?;
    sched.check_stable(s)?;
    let entries = prepare_entries(s, 0.0, init);
    let alphas = sched.alphas();
    let (_, g) = final_risk_and_alpha_grad(&entries, &alphas, &sched.lens(), batch_size);
    let alpha_max = 2.0 / s.h_max();
    Ok(g.iter()
        .zip(&alphas)
        .map(|(&d, &a)| {
            let dl = d * a;
            if a >= alpha_max * (1.0 - EDGE_TOL) && dl < 0.0 {
                0.0
            } else {
                dl
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct ScheduleOptions {
    pub bfgs: BfgsOptions,
    pub init: InitCondition,
    /// Learning-rate decades below `2/h_max` covered by the constant-rate scan.
    pub constant_decades: u32,
    /// Upper end of the horizon search.
    pub cap: u64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            bfgs: BfgsOptions::default(),
            init: InitCondition::default(),
            constant_decades: 8,
            cap: DEFAULT_STEP_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedSchedule {
    pub schedule: Schedule,
    pub final_risk: f64,
    /// Best constant learning rate on the same horizon and its risk.
    pub constant_alpha: f64,
    pub constant_risk: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Width in nats of the learning-rate range reachable by the optimizer.
const LOG_RANGE: f64 = 40.0;

/// Smooth two-sided clamp of `ln alpha` into `[ln alpha_max - LOG_RANGE, ln alpha_max]`.
fn clamp_log(u: f64, log_max: f64) -> f64 {
    let log_min = log_max - LOG_RANGE;
    log_min + softplus(u - log_min) - softplus(u - log_max)
}

fn clamp_log_deriv(u: f64, log_max: f64) -> f64 {
    sigmoid(u - log_max + LOG_RANGE) - sigmoid(u - log_max)
}

fn unclamp_log(l: f64, log_max: f64) -> f64 {
    let l = l.min(log_max - 1e-9);
    log_max - (log_max - l).exp_m1().ln()
}

/// Best constant learning rate for horizon `steps`: log-spaced scan at ten
/// points per decade, refined by golden section on the log risk.
fn best_constant(
    entries: &[PreparedEntry],
    steps: u64,
    batch_size: f64,
    alpha_max: f64,
    decades: u32,
) -> (f64, f64) {
    let risk = |log_a: f64| {
        final_risk_and_alpha_grad(entries, &[log_a.exp().min(alpha_max)], &[steps], batch_size).0
    };
    let log_max = alpha_max.ln();
    let n = 10 * decades as usize;
    let step = std::f64::consts::LN_10 / 10.0;
    let mut best = (0usize, f64::INFINITY);
    for k in 0..=n {
        let r = risk(log_max - k as f64 * step);
        if r < best.1 {
            best = (k, r);
        }
    }
    let mut lo = log_max - (best.0 + 1).min(n) as f64 * step;
    let mut hi = log_max - best.0.saturating_sub(1) as f64 * step;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (risk(c), risk(d));
    for _ in 0..100 {
        if hi - lo < 1e-12 {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = risk(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = risk(d);
        }
    }
    let mut out = (log_max - best.0 as f64 * step, best.1);
    for (x, r) in [(c, fc), (d, fd)] {
        if r < out.1 {
            out = (x, r);
        }
    }
    (out.0.exp().min(alpha_max), out.1)
}

/// Minimizes the final risk after `steps` steps over `n_pieces`
/// near-equal-length pieces. Starts from the best constant learning rate;
/// the result never has higher risk than that constant schedule.
pub fn optimize_fixed_horizon(
    s: &Spectrum,
    batch_size: f64,
    steps: u64,
    n_pieces: usize,
    opts: &ScheduleOptions,
) -> Result<OptimizedSchedule> {
    check_batch(batch_size)?;
    if steps == 0 {
        return Err(NqmError::InvalidArgument("horizon must be at least one step".into()));
    }
    if n_pieces == 0 {
        return Err(NqmError::InvalidArgument("schedule needs at least one piece".into()));
    }
    let n = n_pieces.min(steps as usize);
    let lens = Schedule::equal_lengths(steps, n)?;
    let entries = prepare_entries(s, 0.0, &opts.init);
    let alpha_max = 2.0 / s.h_max();
    let log_max = alpha_max.ln();
    let (alpha0, risk0) = best_constant(&entries, steps, batch_size, alpha_max, opts.constant_decades);

    let objective = |u: &[f64]| {
        let alphas: Vec<f64> = u.iter().map(|&x| clamp_log(x, log_max).exp().min(alpha_max)).collect();
        let (r, g) = final_risk_and_alpha_grad(&entries, &alphas, &lens, batch_size);
        let r = r.max(1e-300);
        let grad = g
            .iter()
            .zip(&alphas)
            .zip(u)
            .map(|((&d, &a), &x)| d * a * clamp_log_deriv(x, log_max) / r)
            .collect();
        (r.ln(), grad)
    };
    let u0 = vec![unclamp_log(alpha0.ln(), log_max); n];
    let res = bfgs::minimize(objective, &u0, &opts.bfgs);
    let alphas: Vec<f64> = res.x.iter().map(|&x| clamp_log(x, log_max).exp().min(alpha_max)).collect();
    let risk = final_risk_and_alpha_grad(&entries, &alphas, &lens, batch_size).0;
    if !res.converged() {
        log::debug!(
            "schedule optimizer stopped after {} iterations ({:?})",
            res.iterations,
            res.termination
        );
    }
    let (alphas, risk) = if risk <= risk0 {
        (alphas, risk)
    } else {
        log::warn!("optimized schedule worse than constant learning rate; keeping the constant");
        (vec![alpha0; n], risk0)
    };
    Ok(OptimizedSchedule {
        schedule: Schedule::from_parts(&alphas, &lens)?,
        final_risk: risk,
        constant_alpha: alpha0,
        constant_risk: risk0,
        iterations: res.iterations,
        converged: res.converged(),
    })
}

/// Smallest horizon for which the optimized schedule reaches `target`,
/// by bisection over `[1, opts.cap]` down to a single step.
pub fn min_steps_with_schedule(
    s: &Spectrum,
    batch_size: f64,
    target: f64,
    n_pieces: usize,
    opts: &ScheduleOptions,
) -> Result<(u64, OptimizedSchedule)> {
    check_batch(batch_size)?;
    let initial: f64 = prepare_entries(s, 0.0, &opts.init)
        .iter()
        .map(|e| e.weight * 0.5 * e.h * e.a0)
        .sum();
    if !(target > 0.0 && target < initial) {
        return Err(NqmError::InvalidArgument(format!(
            "target must lie in (0, initial risk {initial}), got {target}"
        )));
    }
    let at_cap = optimize_fixed_horizon(s, batch_size, opts.cap, n_pieces, opts)?;
    if at_cap.final_risk > target {
        return Err(NqmError::Unreachable {
            target,
            reason: format!(
                "optimized schedule reaches only {:.4e} within {} steps",
                at_cap.final_risk, opts.cap
            ),
        });
    }
    let (mut lo, mut hi, mut best) = (0u64, opts.cap, at_cap);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let r = optimize_fixed_horizon(s, batch_size, mid, n_pieces, opts)?;
        if r.final_risk <= target {
            hi = mid;
            best = r;
        } else {
            lo = mid;
        }
    }
    Ok((hi, best))
}
