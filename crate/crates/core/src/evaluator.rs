//! Random-access evaluation of exact total risk, and first-passage search.
//!
//! Each coordinate's risk splits into a transient part driven by the initial
//! condition and an accumulated-noise part. The noise part never decreases.
//! For coordinates whose characteristic roots are real and non-negative, or
//! for plain SGD, the transient part never increases. That gives a cheap
//! lower bound on risk over any step interval, and a branch-and-bound search
//! uses it to find the first step at which total risk drops to a target.
//!
//! Momentum and EMA coordinates are advanced with power-of-two jumps of the
//! augmented LDS matrix `[[T, n], [0, 1]]`. The result is the same
//! recurrence, evaluated in `O(log t)` instead of `O(t)`.

use rayon::prelude::*;

use crate::dynamics::{
    check_entry_stable, ema_initial_state, ema_transition, momentum_initial_state, momentum_transition,
    prepare_entries, quadratic_roots, root_coefficients, Lds, OptimizerConfig, PreparedEntry,
    SgdContraction, UpdateRule,
};
use crate::error::Result;
use crate::spectrum::{InitCondition, Spectrum};

type Mat4 = [[f64; 4]; 4];

fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j] + a[i][3] * b[3][j];
        }
    }
    out
}

fn mat4_vec(a: &Mat4, v: &[f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (o, row) in out.iter_mut().zip(a) {
        *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
    }
    out
}

#[derive(Debug, Clone)]
enum Mode {
    Sgd {
        /// weighted initial risk
        init: f64,
        /// weighted `(h/2) alpha^2 c / B`
        noise: f64,
        k: SgdContraction,
    },
    Lds {
        /// `powers[j]` is the augmented transition raised to `2^j`.
        powers: Vec<Mat4>,
        v0: [f64; 4],
        readout: [f64; 3],
        steady: f64,
        monotone: bool,
    },
}

impl Mode {
    fn parts(&self, t: u64) -> (f64, f64) {
        match self {
            Mode::Sgd { init, noise, k } => (init * k.rho_pow(t), noise * k.geometric_sum(t)),
            Mode::Lds {
                powers, v0, readout, ..
            } => {
                let mut det = *v0;
                let mut acc = [0.0, 0.0, 0.0, 1.0];
                let mut rest = t;
                let mut j = 0;
                while rest > 0 {
                    if rest & 1 == 1 {
                        det = mat4_vec(&powers[j], &det);
                        acc = mat4_vec(&powers[j], &acc);
                    }
                    rest >>= 1;
                    j += 1;
                }
                let dot = |v: &[f64; 4]| readout[0] * v[0] + readout[1] * v[1] + readout[2] * v[2];
                (dot(&det), dot(&acc))
            }
        }
    }

    fn steady(&self) -> f64 {
        match self {
            Mode::Sgd { init, noise, k } => {
                if k.one_minus_rho > 0.0 {
                    noise / k.one_minus_rho
                } else if *noise > 0.0 {
                    f64::INFINITY
                } else {
                    *init
                }
            }
            Mode::Lds { steady, .. } => *steady,
        }
    }

    fn monotone(&self) -> bool {
        match self {
            Mode::Sgd { .. } => true,
            Mode::Lds { monotone, .. } => *monotone,
        }
    }
}

/// Exact total risk of one optimizer configuration on one spectrum.
#[derive(Debug, Clone)]
pub struct RiskModel {
    modes: Vec<Mode>,
    horizon: u64,
}

impl RiskModel {
    /// Prepares evaluation for any `t <= horizon`.
    pub fn new(s: &Spectrum, config: &OptimizerConfig, init: &InitCondition, horizon: u64) -> Result<Self> {
        config.validate()?;
        let entries = prepare_entries(s, config.p, init);
        for e in &entries {
            check_entry_stable(config, e)?;
        }
        let levels = (64 - horizon.leading_zeros()) as usize;
        let modes = entries
            .par_iter()
            .with_min_len(32)
            .map(|e| build_mode(config, e, levels))
            .collect();
        Ok(RiskModel { modes, horizon })
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// Transient and accumulated-noise parts of the total risk at `t`.
    pub fn parts(&self, t: u64) -> (f64, f64) {
        debug_assert!(t <= self.horizon.max(1) * 2);
        self.modes.iter().fold((0.0, 0.0), |(d, n), m| {
            let (md, mn) = m.parts(t);
            (d + md, n + mn)
        })
    }

    pub fn risk(&self, t: u64) -> f64 {
        let (d, n) = self.parts(t);
        d + n
    }

    /// Limit of the total risk as `t -> infinity`.
    pub fn steady_state(&self) -> f64 {
        self.modes.iter().map(Mode::steady).sum()
    }

    /// A value no larger than the risk at any step in `lo..=hi`.
    pub fn lower_bound(&self, lo: u64, hi: u64) -> f64 {
        self.modes
            .iter()
            .map(|m| {
                let (_, noise_lo) = m.parts(lo);
                let det_hi = if m.monotone() { m.parts(hi).0 } else { 0.0 };
                det_hi + noise_lo
            })
            .sum()
    }

    /// Smallest `t <= cap` with `risk(t) <= target`.
    pub fn first_crossing(&self, target: f64, cap: u64) -> Option<u64> {
        if self.risk(0) <= target {
            return Some(0);
        }
        let cap = cap.min(self.horizon);
        let mut lo = 1u64;
        while lo <= cap {
            let hi = lo.saturating_mul(2).saturating_sub(1).min(cap);
            if let Some(t) = self.search(target, lo, hi) {
                return Some(t);
            }
            if hi == u64::MAX {
                break;
            }
            lo = hi + 1;
        }
        None
    }

    fn search(&self, target: f64, lo: u64, hi: u64) -> Option<u64> {
        if self.lower_bound(lo, hi) > target {
            return None;
        }
        if hi - lo < 16 {
            return (lo..=hi).find(|&t| self.risk(t) <= target);
        }
        let mid = lo + (hi - lo) / 2;
        self.search(target, lo, mid).or_else(|| self.search(target, mid + 1, hi))
    }
}

fn build_mode(config: &OptimizerConfig, e: &PreparedEntry, levels: usize) -> Mode {
    let scale = e.weight * 0.5 * e.h;
    let (alpha, b) = (config.alpha, config.batch_size);
    let rule = config.rule();
    let (lds, v0, readout) = match rule {
        UpdateRule::Sgd => {
            return Mode::Sgd {
                init: scale * e.a0,
                noise: scale * alpha * alpha * e.c / b,
                k: SgdContraction::new(alpha * e.h),
            }
        }
        UpdateRule::Momentum => (
            momentum_transition(e.h, e.c, alpha, config.beta, b),
            momentum_initial_state(e.a0),
            [scale, 0.0, 0.0],
        ),
        UpdateRule::Ema => {
            let g = 1.0 - config.gamma;
            (
                ema_transition(e.h, e.c, alpha, config.gamma, b),
                ema_initial_state(e.a0, config.gamma),
                [0.0, scale * g * g, 0.0],
            )
        }
    };
    let steady = lds
        .steady_state()
        .map_or(f64::INFINITY, |v| readout[0] * v[0] + readout[1] * v[1] + readout[2] * v[2]);
    let (sum, product) = root_coefficients(rule, alpha * e.h, config.beta, config.gamma);
    let (r1, r2) = quadratic_roots(sum, product);
    let monotone = r1.im == 0.0 && r1.re >= 0.0 && r2.re >= 0.0;
    Mode::Lds {
        powers: augmented_powers(&lds, levels),
        v0: [v0[0], v0[1], v0[2], 0.0],
        readout,
        steady,
        monotone,
    }
}

fn augmented_powers(lds: &Lds, levels: usize) -> Vec<Mat4> {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&lds.transition[i]);
        m[i][3] = lds.noise[i];
    }
    m[3][3] = 1.0;
    let mut out = Vec::with_capacity(levels.max(1));
    out.push(m);
    for j in 1..levels {
        let prev = &out[j - 1];
        out.push(mat4_mul(prev, prev));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::risk_trajectory;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn matches_literal_stepping_for_every_rule() {
        let s = Spectrum::power(30, true).unwrap();
        let init = InitCondition::default();
        let configs = [
            OptimizerConfig::sgd(0.7, 4.0),
            OptimizerConfig::sgd(0.3, 2.0).with_power(0.5),
            OptimizerConfig::momentum(0.2, 0.9, 16.0),
            OptimizerConfig::momentum(0.05, 0.5, 1.0).with_power(1.0),
            OptimizerConfig::ema(0.5, 0.95, 8.0),
            OptimizerConfig::ema(1.5, 0.3, 8.0),
        ];
        for cfg in &configs {
            let traj = risk_trajectory(&s, cfg, 600, &init).unwrap();
            let model = RiskModel::new(&s, cfg, &init, 600).unwrap();
            for t in [0usize, 1, 2, 3, 17, 64, 255, 256, 599, 600] {
                let fast = model.risk(t as u64);
                assert!(close(fast, traj.risks[t], 1e-10), "{cfg:?} t={t}: {fast} vs {}", traj.risks[t]);
            }
        }
    }

    #[test]
    fn steady_state_is_the_limit() {
        let s = Spectrum::power(10, true).unwrap();
        let init = InitCondition::default();
        for cfg in [
            OptimizerConfig::sgd(0.5, 3.0),
            OptimizerConfig::momentum(0.1, 0.8, 3.0),
            OptimizerConfig::ema(0.5, 0.9, 3.0),
        ] {
            let model = RiskModel::new(&s, &cfg, &init, 1 << 40).unwrap();
            assert!(close(model.risk(1 << 40), model.steady_state(), 1e-9));
        }
    }

    #[test]
    fn deterministic_first_crossing() {
        // risk(t) = 0.5 * 0.25^t
        let s = Spectrum::power(1, false).unwrap();
        let model = RiskModel::new(&s, &OptimizerConfig::sgd(0.5, 1.0), &InitCondition::default(), 1000).unwrap();
        assert_eq!(model.first_crossing(0.01, 1000), Some(3));
        assert_eq!(model.first_crossing(0.5, 1000), Some(0));
        assert_eq!(model.first_crossing(0.01, 2), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lower_bound_is_valid(
            alpha in 0.01f64..1.9,
            beta in 0.0f64..0.99,
            use_ema in any::<bool>(),
            b in 1.0f64..64.0,
            lo in 0u64..200,
            len in 0u64..200,
        ) {
            let s = Spectrum::power(12, true).unwrap();
            let cfg = if use_ema {
                OptimizerConfig::ema(alpha, beta, b)
            } else {
                OptimizerConfig::momentum(alpha, beta, b)
            };
            let hi = lo + len;
            if let Ok(model) = RiskModel::new(&s, &cfg, &InitCondition::default(), hi) {
                let lb = model.lower_bound(lo, hi);
                for t in lo..=hi {
                    prop_assert!(lb <= model.risk(t) * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn first_crossing_matches_scan(
            alpha in 0.01f64..1.9,
            beta in 0.0f64..0.95,
            b in 1.0f64..1e4,
            target in 0.01f64..0.5,
        ) {
            let s = Spectrum::power(8, true).unwrap();
            let cfg = OptimizerConfig::momentum(alpha, beta, b);
            let cap = 3000;
            if let Ok(model) = RiskModel::new(&s, &cfg, &InitCondition::default(), cap) {
                let scan = (0..=cap).find(|&t| model.risk(t) <= target);
                prop_assert_eq!(model.first_crossing(target, cap), scan);
            }
        }
    }
}
