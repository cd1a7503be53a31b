//! Verification batteries: sampled trajectories against the exact risk, and
//! exact momentum/EMA risk against the closed-form upper bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::VerifyConfig;
use crate::dynamics::{
    ema_initial_state, ema_risk_bound, ema_transition, lds_simulate, momentum_initial_state,
    momentum_risk_bound, momentum_transition, risk_trajectory, OptimizerConfig,
};
use crate::error::Result;
use crate::montecarlo::{estimate, LearningRate};
use crate::spectrum::{InitCondition, Spectrum};

/// Absolute slack allowed when comparing exact risk with a bound.
pub const BOUND_TOL: f64 = 1e-9;
/// Largest accepted `|z|` in the sampled checks.
pub const Z_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub suite: String,
    pub config: String,
    /// Max `|z|` for sampled checks; max `exact - bound` for bound checks.
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Optimizers exercised by the sampled checks: plain, momentum,
/// preconditioned and averaged.
pub fn sampled_configs() -> Vec<(&'static str, OptimizerConfig)> {
    vec![
        ("sgd", OptimizerConfig::sgd(0.4, 8.0)),
        ("momentum", OptimizerConfig::momentum(0.05, 0.9, 8.0)),
        ("preconditioned", OptimizerConfig::sgd(0.4, 8.0).with_power(0.5)),
        ("ema", OptimizerConfig::ema(0.4, 0.99, 8.0)),
    ]
}

/// Exact risk per step. With `mutation` the noise-floor contribution enters
/// with the wrong sign.
pub fn analytic_risk(
    s: &Spectrum,
    config: &OptimizerConfig,
    steps: usize,
    init: &InitCondition,
    mutation: bool,
) -> Result<Vec<f64>> {
    let exact = risk_trajectory(s, config, steps, init)?.risks;
    if !mutation {
        return Ok(exact);
    }
    let noise_only = risk_trajectory(
        s,
        config,
        steps,
        &InitCondition {
            second_moment: 0.0,
            ..*init
        },
    )?
    .risks;
    Ok(exact.iter().zip(&noise_only).map(|(e, n)| e - 2.0 * n).collect())
}

pub fn sampled_suite(v: &VerifyConfig, seed: u64) -> Result<Vec<CheckRow>> {
    let s = Spectrum::power(v.dimension, true)?;
    let init = InitCondition::default();
    sampled_configs()
        .into_iter()
        .map(|(name, cfg)| {
            let mc = estimate(&s, &cfg, LearningRate::Constant, v.steps, v.n_trajectories, &init, v.noise, seed)?;
            let exact = analytic_risk(&s, &cfg, v.steps, &init, v.mutation)?;
            let z = mc.max_abs_z(&exact);
            Ok(CheckRow {
                suite: format!("sampled:{name}"),
                config: format!(
                    "d={} alpha={} beta={} gamma={} p={} B={} T={} n={} noise={:?}",
                    v.dimension, cfg.alpha, cfg.beta, cfg.gamma, cfg.p, cfg.batch_size, v.steps, v.n_trajectories, v.noise
                ),
                statistic: z,
                threshold: Z_THRESHOLD,
                pass: z <= Z_THRESHOLD,
            })
        })
        .collect()
}

/// A random single-coordinate problem inside the stable region.
#[derive(Debug, Clone, Copy)]
pub struct RandomProblem {
    pub h: f64,
    pub c: f64,
    pub alpha: f64,
    pub coef: f64,
    pub batch_size: f64,
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// `h, c` log-uniform in `[1e-3, 1]`, `B` log-uniform in `[1, 1024]`,
/// momentum/averaging uniform in `[0, 0.999)`, and `alpha h` uniform over
/// 98% of the stable range (`2(1 + beta)` for momentum, 2 for averaging).
pub fn random_problem<R: Rng>(rng: &mut R, momentum: bool) -> RandomProblem {
    let h = log_uniform(rng, 1e-3, 1.0);
    let c = log_uniform(rng, 1e-3, 1.0);
    let batch_size = log_uniform(rng, 1.0, 1024.0);
    let coef = rng.gen_range(0.0..0.999);
    let edge = if momentum { 2.0 * (1.0 + coef) } else { 2.0 };
    let ah = rng.gen_range(1e-4..0.98) * edge;
    RandomProblem {
        h,
        c,
        alpha: ah / h,
        coef,
        batch_size,
    }
}

/// Largest `exact - bound` over steps `0..=steps` for one problem.
pub fn bound_gap(p: &RandomProblem, momentum: bool, steps: usize) -> Result<f64> {
    let init = InitCondition::default();
    let (lds, v0) = if momentum {
        (
            momentum_transition(p.h, p.c, p.alpha, p.coef, p.batch_size),
            momentum_initial_state(1.0),
        )
    } else {
        (
            ema_transition(p.h, p.c, p.alpha, p.coef, p.batch_size),
            ema_initial_state(1.0, p.coef),
        )
    };
    let states = lds_simulate(&lds, v0, steps)?;
    let g = 1.0 - p.coef;
    let mut worst = f64::NEG_INFINITY;
    for (t, v) in states.iter().enumerate() {
        let (exact, bound) = if momentum {
            (
                0.5 * p.h * v[0],
                momentum_risk_bound(p.h, p.c, p.alpha, p.coef, p.batch_size, t as u64, &init),
            )
        } else {
            (
                0.5 * p.h * g * g * v[1],
                ema_risk_bound(p.h, p.c, p.alpha, p.coef, p.batch_size, t as u64, &init),
            )
        };
        worst = worst.max(exact - bound);
    }
    Ok(worst)
}

pub fn bound_suite(n_configs: usize, steps: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (k, momentum) in [true, false].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + k as u64);
        let mut worst = f64::NEG_INFINITY;
        let mut worst_problem = None;
        for _ in 0..n_configs {
            let p = random_problem(&mut rng, momentum);
            let gap = bound_gap(&p, momentum, steps)?;
            if gap > worst {
                worst = gap;
                worst_problem = Some(p);
            }
        }
        let name = if momentum { "momentum" } else { "ema" };
        rows.push(CheckRow {
            suite: format!("bound:{name}"),
            config: format!("{n_configs} random problems x {steps} steps; worst {worst_problem:?}"),
            statistic: worst,
            threshold: BOUND_TOL,
            pass: worst <= BOUND_TOL,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_problems_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for momentum in [true, false] {
            for _ in 0..200 {
                let p = random_problem(&mut rng, momentum);
                let cfg = if momentum {
                    OptimizerConfig::momentum(p.alpha, p.coef, p.batch_size)
                } else {
                    OptimizerConfig::ema(p.alpha, p.coef, p.batch_size)
                };
                let s = Spectrum::new(vec![crate::Entry::new(p.h, p.c, 1.0)]).unwrap();
                assert!(crate::dynamics::steady_state_total_risk(&s, &cfg).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn small_bound_suite_passes() {
        let rows = bound_suite(20, 200, 3).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn mutation_changes_analytic_side() {
        let s = Spectrum::power(5, true).unwrap();
        let cfg = OptimizerConfig::sgd(0.4, 8.0);
        let init = InitCondition::default();
        let good = analytic_risk(&s, &cfg, 20, &init, false).unwrap();
        let bad = analytic_risk(&s, &cfg, 20, &init, true).unwrap();
        assert_eq!(good[0], bad[0]);
        assert!(bad[20] < good[20]);
    }
}
