//! Monte Carlo sampling of NQM trajectories, used to check the analytic
//! risk formulas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{OptimizerConfig, UpdateRule};
use crate::error::{NqmError, Result};
use crate::schedule::Schedule;
use crate::spectrum::{InitCondition, Spectrum};

/// Trajectories per reduction chunk. Fixed so results do not depend on the
/// thread count.
const CHUNK: usize = 256;

/// Zero-mean, unit-variance noise law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Uniform on `(-sqrt 3, sqrt 3)`.
    Uniform,
}

impl NoiseKind {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            NoiseKind::Gaussian => StandardNormal.sample(rng),
            NoiseKind::Uniform => 3f64.sqrt() * (2.0 * rng.gen::<f64>() - 1.0),
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = NqmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            other => Err(NqmError::Parse(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Learning rate source: the config's constant `alpha`, or a schedule.
#[derive(Debug, Clone, Copy)]
pub enum LearningRate<'a> {
    Constant,
    Schedule(&'a Schedule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean_risk: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_trajectories: usize,
    pub seed: u64,
}

impl McEstimate {
    /// `max_t |analytic_t - mean_t| / std_error_t`. A step with zero
    /// standard error counts as infinite unless the two agree to 1e-12.
    pub fn max_abs_z(&self, analytic: &[f64]) -> f64 {
        self.mean_risk
            .iter()
            .zip(&self.std_error)
            .zip(analytic)
            .map(|((m, se), a)| {
                let d = (m - a).abs();
                if *se > 0.0 {
                    d / se
                } else if d <= 1e-12 * a.abs().max(1e-300) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

fn check_sampling_inputs(s: &Spectrum, config: &OptimizerConfig, lr: LearningRate, steps: usize) -> Result<()> {
    config.validate()?;
    if !s.is_unit_weight() {
        return Err(NqmError::InvalidSpectrum(
            "sampling needs explicit coordinates (all weights 1); quantized spectra are not supported".into(),
        ));
    }
    if let LearningRate::Schedule(sched) = lr {
        if sched.total_steps() < steps as u64 {
            return Err(NqmError::InvalidArgument(format!(
                "schedule covers {} steps, {} requested",
                sched.total_steps(),
                steps
            )));
        }
    }
    Ok(())
}

/// Per-step learning rates for `steps` steps.
fn alphas(config: &OptimizerConfig, lr: LearningRate, steps: usize) -> Vec<f64> {
    match lr {
        LearningRate::Constant => vec![config.alpha; steps],
        LearningRate::Schedule(sched) => sched
            .pieces
            .iter()
            .flat_map(|p| std::iter::repeat_n(p.alpha, p.len as usize))
            .take(steps)
            .collect(),
    }
}

/// Per-coordinate constants: curvature, noise scale and preconditioner.
struct Coord {
    h: f64,
    noise_sd: f64,
    precond: f64,
}

fn coords(s: &Spectrum, config: &OptimizerConfig) -> Vec<Coord> {
    s.entries()
        .iter()
        .map(|e| Coord {
            h: e.h,
            noise_sd: (e.c / config.batch_size).sqrt(),
            precond: if config.p == 0.0 { 1.0 } else { e.h.powf(-config.p) },
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_trajectory(
    coords: &[Coord],
    config: &OptimizerConfig,
    alphas: &[f64],
    init: &InitCondition,
    noise: NoiseKind,
    rng: &mut ChaCha8Rng,
    out: &mut [f64],
) {
    let d = coords.len();
    let sd0 = init.second_moment.sqrt();
    let mut theta: Vec<f64> = (0..d)
        .map(|_| if init.mean_zero { sd0 * noise.sample(rng) } else { sd0 })
        .collect();
    let rule = config.rule();
    let mut aux = match rule {
        UpdateRule::Sgd => Vec::new(),
        UpdateRule::Momentum => vec![0.0; d],
        UpdateRule::Ema => theta.clone(),
    };
    let risk_of = |v: &[f64]| -> f64 { coords.iter().zip(v).map(|(c, x)| 0.5 * c.h * x * x).sum() };
    out[0] = risk_of(if rule == UpdateRule::Ema { &aux } else { &theta });
    for (t, &alpha) in alphas.iter().enumerate() {
        for (i, c) in coords.iter().enumerate() {
            let g = c.precond * (c.h * theta[i] + c.noise_sd * noise.sample(rng));
            match rule {
                UpdateRule::Sgd => theta[i] -= alpha * g,
                UpdateRule::Momentum => {
                    aux[i] = config.beta * aux[i] + g;
                    theta[i] -= alpha * aux[i];
                }
                UpdateRule::Ema => {
                    theta[i] -= alpha * g;
                    aux[i] = config.gamma * aux[i] + (1.0 - config.gamma) * theta[i];
                }
            }
        }
        out[t + 1] = risk_of(if rule == UpdateRule::Ema { &aux } else { &theta });
    }
}

fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Risk at steps `0..=steps` of one sampled trajectory. The random stream is
/// determined by `(seed, index)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectory(
    s: &Spectrum,
    config: &OptimizerConfig,
    lr: LearningRate,
    steps: usize,
    init: &InitCondition,
    noise: NoiseKind,
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    check_sampling_inputs(s, config, lr, steps)?;
    let cs = coords(s, config);
    let a = alphas(config, lr, steps);
    let mut out = vec![0.0; steps + 1];
    run_trajectory(&cs, config, &a, init, noise, &mut trajectory_rng(seed, index), &mut out);
    Ok(out)
}

/// Running mean and sum of squared deviations per step.
#[derive(Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        let n = self.n + o.n;
        for i in 0..self.mean.len() {
            let d = o.mean[i] - self.mean[i];
            self.mean[i] += d * o.n / n;
            self.m2[i] += o.m2[i] + d * d * self.n * o.n / n;
        }
        self.n = n;
    }
}

/// Mean risk and standard error per step over `n_trajectories` sampled
/// trajectories. Bit-identical for equal inputs regardless of thread count.
#[allow(clippy::too_many_arguments)]
pub fn estimate(
    s: &Spectrum,
    config: &OptimizerConfig,
    lr: LearningRate,
    steps: usize,
    n_trajectories: usize,
    init: &InitCondition,
    noise: NoiseKind,
    seed: u64,
) -> Result<McEstimate> {
    if n_trajectories < 2 {
        return Err(NqmError::InvalidArgument(format!(
            "need at least 2 trajectories, got {n_trajectories}"
        )));
    }
    check_sampling_inputs(s, config, lr, steps)?;
    let cs = coords(s, config);
    let a = alphas(config, lr, steps);
    let n_chunks = n_trajectories.div_ceil(CHUNK);
    let chunks: Vec<Moments> = (0..n_chunks)
        .into_par_iter()
        .map(|k| {
            let mut acc = Moments::new(steps + 1);
            let mut buf = vec![0.0; steps + 1];
            for i in k * CHUNK..((k + 1) * CHUNK).min(n_trajectories) {
                run_trajectory(&cs, config, &a, init, noise, &mut trajectory_rng(seed, i as u64), &mut buf);
                acc.push(&buf);
            }
            acc
        })
        .collect();
    let mut total = Moments::new(steps + 1);
    for c in &chunks {
        total.merge(c);
    }
    let n = total.n;
    Ok(McEstimate {
        std_error: total.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect(),
        mean_risk: total.mean,
        n_trajectories,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::risk_trajectory;

    const DET: InitCondition = InitCondition {
        second_moment: 1.0,
        mean_zero: false,
    };

    #[test]
    fn noiseless_equals_recurrence() {
        let s = Spectrum::power(5, false).unwrap();
        for cfg in [
            OptimizerConfig::sgd(0.7, 1.0),
            OptimizerConfig::momentum(0.3, 0.8, 1.0),
            OptimizerConfig::ema(0.5, 0.9, 1.0),
            OptimizerConfig::sgd(0.3, 1.0).with_power(0.5),
        ] {
            let mc = sample_trajectory(&s, &cfg, LearningRate::Constant, 30, &DET, NoiseKind::Gaussian, 1, 0).unwrap();
            let exact = risk_trajectory(&s, &cfg, 30, &DET).unwrap().risks;
            for (a, b) in mc.iter().zip(&exact) {
                assert!((a - b).abs() <= 1e-12 * b.max(1e-300), "{cfg:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_constant() {
        let s = Spectrum::power(6, true).unwrap();
        let r = sample_trajectory(
            &s,
            &OptimizerConfig::sgd(0.0, 1.0),
            LearningRate::Constant,
            20,
            &InitCondition::default(),
            NoiseKind::Gaussian,
            9,
            3,
        )
        .unwrap();
        assert!(r.iter().all(|&x| x == r[0]));
    }

    #[test]
    fn seeded_reproducibility() {
        let s = Spectrum::power(4, true).unwrap();
        let cfg = OptimizerConfig::momentum(0.2, 0.5, 2.0);
        let init = InitCondition::default();
        let a = estimate(&s, &cfg, LearningRate::Constant, 10, 600, &init, NoiseKind::Gaussian, 42).unwrap();
        let b = estimate(&s, &cfg, LearningRate::Constant, 10, 600, &init, NoiseKind::Gaussian, 42).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool
            .install(|| estimate(&s, &cfg, LearningRate::Constant, 10, 600, &init, NoiseKind::Gaussian, 42))
            .unwrap();
        assert_eq!(a, c);
        let d = estimate(&s, &cfg, LearningRate::Constant, 10, 600, &init, NoiseKind::Gaussian, 43).unwrap();
        assert_ne!(a.mean_risk, d.mean_risk);
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let data: Vec<Vec<f64>> = (0..37).map(|i| vec![(i as f64).sin(), (i * i) as f64]).collect();
        let mut whole = Moments::new(2);
        data.iter().for_each(|x| whole.push(x));
        let mut a = Moments::new(2);
        let mut b = Moments::new(2);
        data[..10].iter().for_each(|x| a.push(x));
        data[10..].iter().for_each(|x| b.push(x));
        a.merge(&b);
        for i in 0..2 {
            assert!((a.mean[i] - whole.mean[i]).abs() < 1e-12 * whole.mean[i].abs().max(1.0));
            assert!((a.m2[i] - whole.m2[i]).abs() < 1e-9 * whole.m2[i].abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = Spectrum::power(4, true).unwrap();
        let cfg = OptimizerConfig::sgd(0.1, 1.0);
        let init = InitCondition::default();
        assert!(estimate(&s, &cfg, LearningRate::Constant, 5, 1, &init, NoiseKind::Gaussian, 0).is_err());
        let q = Spectrum::power(100, true).unwrap().quantize(5).unwrap();
        assert!(matches!(
            estimate(&q, &cfg, LearningRate::Constant, 5, 10, &init, NoiseKind::Gaussian, 0),
            Err(NqmError::InvalidSpectrum(_))
        ));
        let short = Schedule::constant(0.1, 3).unwrap();
        assert!(estimate(&s, &cfg, LearningRate::Schedule(&short), 5, 10, &init, NoiseKind::Gaussian, 0).is_err());
    }

    #[test]
    fn z_score_handles_zero_error() {
        let e = McEstimate {
            mean_risk: vec![1.0, 2.0],
            std_error: vec![0.0, 0.5],
            n_trajectories: 2,
            seed: 0,
        };
        assert_eq!(e.max_abs_z(&[1.0, 1.0]), 2.0);
        assert_eq!(e.max_abs_z(&[1.5, 2.0]), f64::INFINITY);
    }
}
