//! Steps-to-target evaluation and exhaustive hyperparameter grids.

use std::cmp::Ordering;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{steady_state_total_risk, OptimizerConfig, UpdateRule};
use crate::error::{NqmError, Result};
use crate::evaluator::RiskModel;
use crate::spectrum::{check_power, InitCondition, Spectrum};

/// Default risk target.
pub const DEFAULT_TARGET: f64 = 0.01;
/// Default step cap for steps-to-target searches.
pub const DEFAULT_STEP_CAP: u64 = 10_000_000;

/// Why a configuration never reaches the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Unreachable {
    /// The risk floor lies above the target.
    SteadyState { floor: f64 },
    /// The floor is below the target but the cap ran out first.
    CapExhausted { cap: u64 },
    /// Some coordinate is outside the stable region.
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Steps {
    Reached(u64),
    Unreachable(Unreachable),
}

impl Steps {
    pub fn reached(&self) -> Option<u64> {
        match self {
            Steps::Reached(t) => Some(*t),
            Steps::Unreachable(_) => None,
        }
    }

    pub fn is_reached(&self) -> bool {
        matches!(self, Steps::Reached(_))
    }
}

impl fmt::Display for Steps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Steps::Reached(t) => write!(f, "{t}"),
            Steps::Unreachable(Unreachable::SteadyState { floor }) => write!(f, "unreachable (floor {floor:.4e})"),
            Steps::Unreachable(Unreachable::CapExhausted { cap }) => write!(f, "unreachable (cap {cap})"),
            Steps::Unreachable(Unreachable::Unstable) => f.write_str("unreachable (unstable)"),
        }
    }
}

/// Smallest step count at which total expected risk is at most `target`.
///
/// A floor above the target is detected from the exact steady state before
/// any simulation.
pub fn steps_to_target(
    s: &Spectrum,
    config: &OptimizerConfig,
    target: f64,
    cap: u64,
    init: &InitCondition,
) -> Result<Steps> {
    config.validate()?;
    if !(target > 0.0) {
        return Err(NqmError::InvalidArgument(format!("target must be positive, got {target}")));
    }
    let floor = match steady_state_total_risk(s, config) {
        Ok(f) => f,
        Err(NqmError::Unstable { .. }) => return Ok(Steps::Unreachable(Unreachable::Unstable)),
        Err(e) => return Err(e),
    };
    let model = RiskModel::new(s, config, init, cap)?;
    if model.risk(0) <= target {
        return Ok(Steps::Reached(0));
    }
    if floor > target {
        return Ok(Steps::Unreachable(Unreachable::SteadyState { floor }));
    }
    Ok(match model.first_crossing(target, cap) {
        Some(t) => Steps::Reached(t),
        None => Steps::Unreachable(Unreachable::CapExhausted { cap }),
    })
}

/// An update rule together with a preconditioner power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub rule: UpdateRule,
    pub p: f64,
}

impl Family {
    pub fn new(rule: UpdateRule, p: f64) -> Result<Self> {
        check_power(p)?;
        Ok(Family { rule, p })
    }

    pub fn sgd() -> Self {
        Family { rule: UpdateRule::Sgd, p: 0.0 }
    }

    pub fn momentum() -> Self {
        Family {
            rule: UpdateRule::Momentum,
            p: 0.0,
        }
    }

    pub fn ema() -> Self {
        Family { rule: UpdateRule::Ema, p: 0.0 }
    }

    pub fn with_power(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn label(&self) -> String {
        format!("{}(p={})", self.rule.as_str(), self.p)
    }

    fn config(&self, alpha: f64, coef: f64, batch_size: f64) -> OptimizerConfig {
        let base = match self.rule {
            UpdateRule::Sgd => OptimizerConfig::sgd(alpha, batch_size),
            UpdateRule::Momentum => OptimizerConfig::momentum(alpha, coef, batch_size),
            UpdateRule::Ema => OptimizerConfig::ema(alpha, coef, batch_size),
        };
        base.with_power(self.p)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for Family {
    type Err = NqmError;

    /// `sgd`, `momentum:0.5`, `ema:1` (rule and optional power).
    fn from_str(s: &str) -> Result<Self> {
        let (rule, p) = match s.split_once(':') {
            Some((r, p)) => (
                r,
                p.parse::<f64>()
                    .map_err(|_| NqmError::Parse(format!("bad power in family {s:?}")))?,
            ),
            None => (s, 0.0),
        };
        Family::new(rule.parse()?, p)
    }
}

/// Hyperparameter grids. `coef` is the momentum or averaging grid; it is
/// ignored for plain SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub alpha: Vec<f64>,
    pub coef: Vec<f64>,
}

impl Grids {
    /// Log-spaced learning rates from `1e-5 * 2/h1` to `2/h1` at 20 points
    /// per decade (`h1` is the largest preconditioned curvature) and
    /// `{0} U {1 - 10^(-k/4) : k = 1..12}` for momentum or averaging.
    pub fn default_for(s: &Spectrum, p: f64) -> Result<Self> {
        let h1 = s.precondition(p)?.h_max();
        Ok(Grids {
            alpha: log_grid(2.0 / h1, 5, 20),
            coef: default_coef_grid(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.coef.is_empty() {
            return Err(NqmError::InvalidArgument("hyperparameter grids must be non-empty".into()));
        }
        if self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(NqmError::InvalidArgument("learning rates must be positive".into()));
        }
        if self.coef.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(NqmError::InvalidArgument("momentum/averaging values must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `top * 10^(-k/per_decade)` for `k = decades*per_decade ..= 0`, ascending.
pub fn log_grid(top: f64, decades: u32, per_decade: u32) -> Vec<f64> {
    let n = decades * per_decade;
    (0..=n)
        .rev()
        .map(|k| {
            if k == 0 {
                top
            } else {
                top * 10f64.powf(-(k as f64) / per_decade as f64)
            }
        })
        .collect()
}

pub fn default_coef_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((1..=12).map(|k| 1.0 - 10f64.powf(-(k as f64) / 4.0)))
        .collect()
}

/// Outcome of a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub family: Family,
    /// Winner, or the config with the lowest risk floor when nothing reaches
    /// the target.
    pub best_config: OptimizerConfig,
    pub steps: Steps,
    /// `alpha / (1 - beta)`
    pub effective_lr: f64,
    pub searched: usize,
    /// The winning learning rate is a grid endpoint, or the winning
    /// momentum/averaging value is the top of its grid.
    pub frontier_flag: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub cap: u64,
    pub init: InitCondition,
    /// Extra learning-rate decades tried below the grid when the low edge wins.
    pub max_extra_decades: u32,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            cap: DEFAULT_STEP_CAP,
            init: InitCondition::default(),
            max_extra_decades: 5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    steps: u64,
    alpha_idx: usize,
    coef_idx: usize,
}

impl Candidate {
    /// Fewer steps, then smaller alpha, then smaller beta/gamma.
    fn key(&self) -> (u64, usize, usize) {
        (self.steps, self.alpha_idx, self.coef_idx)
    }
}

#[derive(Debug, Clone, Copy)]
struct Floor {
    value: f64,
    alpha_idx: usize,
    coef_idx: usize,
}

/// Exhaustive search over `grids` for the fewest steps to `target`.
///
/// Rows of the grid (one per momentum/averaging value) run in parallel and
/// share the best step count found so far as a pruning cap. The winner is
/// chosen with a fixed comparator, so the result does not depend on
/// evaluation order.
///
/// When no point reaches the target, or the winner is the smallest learning
/// rate with zero momentum/averaging, the learning-rate grid is extended
/// downward one decade at a time, up to `opts.max_extra_decades`.
pub fn grid_search(
    s: &Spectrum,
    batch_size: f64,
    target: f64,
    family: Family,
    grids: &Grids,
    opts: &SearchOptions,
) -> Result<TuneResult> {
    grids.validate()?;
    if !(target > 0.0) {
        return Err(NqmError::InvalidArgument(format!("target must be positive, got {target}")));
    }
    let per_decade = match grids.alpha.as_slice() {
        [a, b, ..] => (1.0 / (b / a).log10()).round().max(1.0) as u32,
        _ => 20,
    };
    let mut alpha = grids.alpha.clone();
    let mut extra = 0;
    loop {
        let (result, at_floor) = search_once(s, batch_size, target, family, &alpha, &grids.coef, opts)?;
        if !at_floor || extra >= opts.max_extra_decades {
            return Ok(result);
        }
        let lowest = alpha[0];
        let mut lower: Vec<f64> = (1..=per_decade)
            .rev()
            .map(|k| lowest * 10f64.powf(-(k as f64) / per_decade as f64))
            .collect();
        lower.extend_from_slice(&alpha);
        alpha = lower;
        extra += 1;
        log::debug!("{family} B={batch_size}: extending learning-rate grid to {:.3e}", alpha[0]);
    }
}

/// One pass over a fixed grid. The flag reports whether the result sits at
/// the low learning-rate edge of the grid.
fn search_once(
    s: &Spectrum,
    batch_size: f64,
    target: f64,
    family: Family,
    alpha: &[f64],
    coef: &[f64],
    opts: &SearchOptions,
) -> Result<(TuneResult, bool)> {
    let grids = Grids {
        alpha: alpha.to_vec(),
        coef: coef.to_vec(),
    };
    let grids = &grids;
    let coefs: Vec<f64> = if family.rule == UpdateRule::Sgd {
        vec![0.0]
    } else {
        grids.coef.clone()
    };
    let best_cap = AtomicU64::new(opts.cap);

    let rows: Vec<Result<(Option<Candidate>, Option<Floor>)>> = coefs
        .par_iter()
        .enumerate()
        .map(|(ci, &coef)| {
            let mut best: Option<Candidate> = None;
            let mut floor: Option<Floor> = None;
            for (ai, &alpha) in grids.alpha.iter().enumerate() {
                let cfg = family.config(alpha, coef, batch_size);
                cfg.validate()?;
                let Ok(f) = steady_state_total_risk(s, &cfg) else {
                    continue;
                };
                if floor.is_none_or(|fl| f < fl.value) {
                    floor = Some(Floor {
                        value: f,
                        alpha_idx: ai,
                        coef_idx: ci,
                    });
                }
                let cap = best_cap.load(AtomicOrdering::Relaxed);
                let model = RiskModel::new(s, &cfg, &opts.init, cap)?;
                let reached = if model.risk(0) <= target {
                    Some(0)
                } else if f > target {
                    None
                } else {
                    model.first_crossing(target, cap)
                };
                if let Some(steps) = reached {
                    let cand = Candidate {
                        steps,
                        alpha_idx: ai,
                        coef_idx: ci,
                    };
                    if best.map_or(true, |b| cand.key() < b.key()) {
                        best = Some(cand);
                    }
                    best_cap.fetch_min(steps, AtomicOrdering::Relaxed);
                }
            }
            Ok((best, floor))
        })
        .collect();

    let mut best: Option<Candidate> = None;
    let mut floor: Option<Floor> = None;
    for row in rows {
        let (b, f) = row?;
        if let Some(b) = b {
            if best.map_or(true, |cur| b.key() < cur.key()) {
                best = Some(b);
            }
        }
        if let Some(f) = f {
            let better = floor.map_or(true, |cur| {
                f.value
                    .total_cmp(&cur.value)
                    .then((f.alpha_idx, f.coef_idx).cmp(&(cur.alpha_idx, cur.coef_idx)))
                    == Ordering::Less
            });
            if better {
                floor = Some(f);
            }
        }
    }

    let searched = grids.alpha.len() * coefs.len();
    let (alpha_idx, coef_idx, steps) = match (best, floor) {
        (Some(b), _) => (b.alpha_idx, b.coef_idx, Steps::Reached(b.steps)),
        (None, Some(f)) => {
            let why = if f.value > target {
                Unreachable::SteadyState { floor: f.value }
            } else {
                Unreachable::CapExhausted { cap: opts.cap }
            };
            (f.alpha_idx, f.coef_idx, Steps::Unreachable(why))
        }
        (None, None) => (0, 0, Steps::Unreachable(Unreachable::Unstable)),
    };
    let best_config = family.config(grids.alpha[alpha_idx], coefs[coef_idx], batch_size);
    let frontier_flag = alpha_idx == 0
        || alpha_idx + 1 == grids.alpha.len()
        || (coefs.len() > 1 && coef_idx + 1 == coefs.len());
    let at_floor = best.is_none() || (alpha_idx == 0 && coef_idx == 0);
    let result = TuneResult {
        family,
        best_config,
        steps,
        effective_lr: best_config.effective_lr(),
        searched,
        frontier_flag,
    };
    Ok((result, at_floor))
}

/// One row of an optimal-learning-rate curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrCurvePoint {
    pub batch_size: f64,
    pub result: Option<TuneResult>,
    /// Set when tuning failed at this batch size.
    pub error: Option<String>,
}

impl LrCurvePoint {
    pub fn alpha(&self) -> Option<f64> {
        self.result.as_ref().map(|r| r.best_config.alpha)
    }

    pub fn effective_lr(&self) -> Option<f64> {
        self.result.as_ref().map(|r| r.effective_lr)
    }

    pub fn steps(&self) -> Option<Steps> {
        self.result.as_ref().map(|r| r.steps)
    }
}

/// Tuned learning rate (and effective learning rate) at each batch size.
/// A failure at one batch size is recorded in its row.
pub fn optimal_lr_curve(
    s: &Spectrum,
    batch_sizes: &[f64],
    target: f64,
    family: Family,
    grids: &Grids,
    opts: &SearchOptions,
) -> Result<Vec<LrCurvePoint>> {
    if batch_sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(NqmError::InvalidArgument("batch sizes must be ascending".into()));
    }
    Ok(batch_sizes
        .par_iter()
        .with_max_len(1)
        .map(|&b| match grid_search(s, b, target, family, grids, opts) {
            Ok(r) => LrCurvePoint {
                batch_size: b,
                result: Some(r),
                error: None,
            },
            Err(e) => LrCurvePoint {
                batch_size: b,
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

/// CSV row for tuning output.
#[derive(Debug, Clone, Serialize)]
pub struct TuneRow {
    pub family: String,
    #[serde(rename = "B")]
    pub batch_size: f64,
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub effective_lr: f64,
    pub steps: Option<u64>,
    pub unreachable_flag: bool,
    pub frontier_flag: bool,
}

impl From<&TuneResult> for TuneRow {
    fn from(r: &TuneResult) -> Self {
        TuneRow {
            family: r.family.rule.as_str().to_string(),
            batch_size: r.best_config.batch_size,
            p: r.family.p,
            alpha: r.best_config.alpha,
            beta: r.best_config.beta,
            gamma: r.best_config.gamma,
            effective_lr: r.effective_lr,
            steps: r.steps.reached(),
            unreachable_flag: !r.steps.is_reached(),
            frontier_flag: r.frontier_flag,
        }
    }
}

pub fn write_tune_csv<W: std::io::Write>(out: W, results: &[TuneResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(TuneRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::sgd_risk_closed_form;

    #[test]
    fn lr_curve_records_failures_in_rows() {
        let s = Spectrum::power(20, true).unwrap();
        let grids = Grids::default_for(&s, 0.0).unwrap();
        let pts = optimal_lr_curve(&s, &[0.5, 4.0], 0.05, Family::sgd(), &grids, &SearchOptions::default()).unwrap();
        assert!(pts[0].error.is_some() && pts[0].alpha().is_none());
        assert!(pts[1].steps().unwrap().is_reached());
        assert!(optimal_lr_curve(&s, &[4.0, 2.0], 0.05, Family::sgd(), &grids, &SearchOptions::default()).is_err());
    }
    use crate::spectrum::Entry;

    fn single(h: f64, c: f64) -> Spectrum {
        Spectrum::new(vec![Entry::new(h, c, 1.0)]).unwrap()
    }

    #[test]
    fn steps_examples() {
        let init = InitCondition::default();
        let s = single(1.0, 0.0);
        let cfg = OptimizerConfig::sgd(0.5, 1.0);
        // oracle: closed form with c = 0
        let oracle = (0..)
            .find(|&t| sgd_risk_closed_form(1.0, 0.0, 0.5, 1.0, t, &init).unwrap() <= 0.01)
            .unwrap();
        assert_eq!(oracle, 3);
        assert_eq!(steps_to_target(&s, &cfg, 0.01, 100, &init).unwrap(), Steps::Reached(3));

        let noisy = single(1.0, 1.0);
        match steps_to_target(&noisy, &cfg, 0.01, 100, &init).unwrap() {
            Steps::Unreachable(Unreachable::SteadyState { floor }) => {
                assert!((floor - 1.0 / 6.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(steps_to_target(&s, &cfg, 0.5, 100, &init).unwrap(), Steps::Reached(0));
        assert_eq!(
            steps_to_target(&s, &OptimizerConfig::sgd(1e-6, 1.0), 0.01, 100, &init).unwrap(),
            Steps::Unreachable(Unreachable::CapExhausted { cap: 100 })
        );
        assert_eq!(
            steps_to_target(&s, &OptimizerConfig::sgd(2.5, 1.0), 0.01, 100, &init).unwrap(),
            Steps::Unreachable(Unreachable::Unstable)
        );
    }

    #[test]
    fn default_grids() {
        let s = Spectrum::power(100, true).unwrap();
        let g = Grids::default_for(&s, 0.0).unwrap();
        assert_eq!(g.alpha.len(), 101);
        assert_eq!(*g.alpha.last().unwrap(), 2.0);
        assert!((g.alpha[0] - 2e-5).abs() < 1e-18);
        assert_eq!(g.coef.len(), 13);
        assert_eq!(g.coef[0], 0.0);
        assert!((g.coef[12] - 0.999).abs() < 1e-12);
        assert!(g.alpha.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn momentum_with_zero_beta_is_sgd() {
        let s = Spectrum::power(200, true).unwrap().quantize(20).unwrap();
        let mut grids = Grids::default_for(&s, 0.0).unwrap();
        grids.coef = vec![0.0];
        let opts = SearchOptions::default();
        let a = grid_search(&s, 16.0, 0.05, Family::sgd(), &grids, &opts).unwrap();
        let b = grid_search(&s, 16.0, 0.05, Family::momentum(), &grids, &opts).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.best_config.alpha, b.best_config.alpha);
        assert!(a.steps.is_reached());
    }

    #[test]
    fn grid_search_matches_brute_force() {
        let s = Spectrum::power(50, true).unwrap().quantize(10).unwrap();
        let grids = Grids {
            alpha: log_grid(2.0, 2, 5),
            coef: vec![0.0, 0.5, 0.9],
        };
        let opts = SearchOptions {
            cap: 200_000,
            ..Default::default()
        };
        for family in [Family::momentum(), Family::ema(), Family::sgd().with_power(0.5)] {
            let got = grid_search(&s, 4.0, 0.05, family, &grids, &opts).unwrap();
            let mut best: Option<(u64, usize, usize)> = None;
            let coefs = if family.rule == UpdateRule::Sgd { vec![0.0] } else { grids.coef.clone() };
            for (ci, &c) in coefs.iter().enumerate() {
                for (ai, &a) in grids.alpha.iter().enumerate() {
                    let cfg = family.config(a, c, 4.0);
                    if let Steps::Reached(t) = steps_to_target(&s, &cfg, 0.05, opts.cap, &opts.init).unwrap() {
                        if best.map_or(true, |b| (t, ai, ci) < b) {
                            best = Some((t, ai, ci));
                        }
                    }
                }
            }
            let (t, ai, ci) = best.unwrap();
            assert_eq!(got.steps, Steps::Reached(t));
            assert_eq!(got.best_config.alpha, grids.alpha[ai]);
            assert_eq!(got.best_config.beta.max(got.best_config.gamma), coefs[ci]);
            assert_eq!(got.searched, grids.alpha.len() * coefs.len());
        }
    }

    #[test]
    fn all_unreachable_reports_lowest_floor() {
        let s = single(1.0, 1.0);
        let grids = Grids {
            alpha: vec![0.1, 0.5, 1.0],
            coef: vec![0.0],
        };
        let opts = SearchOptions {
            max_extra_decades: 0,
            ..Default::default()
        };
        let r = grid_search(&s, 1.0, 1e-6, Family::sgd(), &grids, &opts).unwrap();
        assert!(!r.steps.is_reached());
        assert_eq!(r.best_config.alpha, 0.1);
        assert!(r.frontier_flag);
    }

    #[test]
    fn grid_extends_below_low_edge() {
        // floor alpha/(2(2-alpha)) needs alpha < 0.04 to reach 0.01
        let s = single(1.0, 1.0);
        let grids = Grids {
            alpha: log_grid(2.0, 1, 4),
            coef: vec![0.0],
        };
        let fixed = SearchOptions {
            max_extra_decades: 0,
            ..Default::default()
        };
        assert!(!grid_search(&s, 1.0, 0.01, Family::sgd(), &grids, &fixed).unwrap().steps.is_reached());
        let r = grid_search(&s, 1.0, 0.01, Family::sgd(), &grids, &SearchOptions::default()).unwrap();
        assert!(r.steps.is_reached());
        assert!(r.best_config.alpha < 0.04);
        assert!(r.searched > grids.alpha.len());
        assert!(!r.frontier_flag);
    }

    #[test]
    fn family_parsing() {
        assert_eq!("sgd".parse::<Family>().unwrap(), Family::sgd());
        assert_eq!("momentum:0.5".parse::<Family>().unwrap(), Family::momentum().with_power(0.5));
        assert!("adam".parse::<Family>().is_err());
        assert!("ema:2".parse::<Family>().is_err());
    }
}
