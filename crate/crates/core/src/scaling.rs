//! Batch-size sweeps, critical batch size fits and the sample-count lower
//! bound on steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::OptimizerConfig;
use crate::error::{NqmError, Result};
use crate::spectrum::Spectrum;
use crate::tuning::{grid_search, Family, Grids, SearchOptions, Steps, TuneResult};

/// `2^0 .. 2^19`
pub fn default_batch_sizes() -> Vec<f64> {
    (0..20).map(|k| (1u64 << k) as f64).collect()
}

/// Steps needed by an estimator that sees `t * batch_size` samples to reach
/// `target` when the risk floor is `d / (2 N)`.
pub fn lower_bound_steps(d_effective: f64, target: f64, batch_size: f64) -> Result<f64> {
    if !(d_effective > 0.0 && target > 0.0 && batch_size > 0.0) {
        return Err(NqmError::InvalidArgument(format!(
            "lower bound needs positive inputs, got d = {d_effective}, target = {target}, B = {batch_size}"
        )));
    }
    Ok(d_effective / (2.0 * target * batch_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub family: Family,
    pub batch_size: f64,
    pub steps: Steps,
    pub lower_bound: f64,
    pub best_config: Option<OptimizerConfig>,
    pub frontier_flag: bool,
    /// Set when the cell failed outright.
    pub error: Option<String>,
}

impl SweepRecord {
    fn from_result(batch_size: f64, lower_bound: f64, family: Family, r: Result<TuneResult>) -> Self {
        match r {
            Ok(t) => SweepRecord {
                family,
                batch_size,
                steps: t.steps,
                lower_bound,
                best_config: Some(t.best_config),
                frontier_flag: t.frontier_flag,
                error: None,
            },
            Err(e) => SweepRecord {
                family,
                batch_size,
                steps: Steps::Unreachable(crate::tuning::Unreachable::Unstable),
                lower_bound,
                best_config: None,
                frontier_flag: false,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub search: SearchOptions,
    /// Replaces the per-family default grids.
    pub grids: Option<Grids>,
}

/// Tunes every `(family, B)` cell. Cells run in parallel; the output is
/// ordered by family (input order) and then batch size.
pub fn sweep(
    s: &Spectrum,
    families: &[Family],
    batch_sizes: &[f64],
    target: f64,
    opts: &SweepOptions,
) -> Result<Vec<SweepRecord>> {
    if batch_sizes.is_empty() {
        return Err(NqmError::InvalidArgument("batch size list is empty".into()));
    }
    if families.is_empty() {
        return Err(NqmError::InvalidArgument("family list is empty".into()));
    }
    if batch_sizes.windows(2).any(|w| !(w[0] < w[1])) || batch_sizes.iter().any(|&b| !(b >= 1.0)) {
        return Err(NqmError::InvalidArgument(
            "batch sizes must be strictly ascending and at least 1".into(),
        ));
    }
    let d = s.d_effective();
    let grids: Vec<Grids> = families
        .iter()
        .map(|f| match &opts.grids {
            Some(g) => Ok(g.clone()),
            None => Grids::default_for(s, f.p),
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, f64)> = (0..families.len())
        .flat_map(|fi| batch_sizes.iter().map(move |&b| (fi, b)))
        .collect();
    let records = cells
        .par_iter()
        .with_max_len(1)
        .map(|&(fi, b)| {
            let family = families[fi];
            let lb = lower_bound_steps(d, target, b)?;
            let r = grid_search(s, b, target, family, &grids[fi], &opts.search);
            Ok(SweepRecord::from_result(b, lb, family, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalBatchFit {
    pub b_crit: f64,
    pub s_infinity: f64,
    /// RMS of `log10(observed) - log10(fitted)`.
    pub residual: f64,
    pub n_points: usize,
    /// The optimum sits on the search boundary or beyond the largest
    /// observed batch size, so the plateau is not identified.
    pub degraded: bool,
}

impl CriticalBatchFit {
    pub fn predict(&self, batch_size: f64) -> f64 {
        self.s_infinity * (1.0 + self.b_crit / batch_size)
    }
}

/// Least-squares fit of `ln steps = ln s_inf + ln(1 + b_crit / B)`.
///
/// For fixed `b_crit` the optimal `ln s_inf` is the mean residual, so only
/// `ln b_crit` is searched: a coarse scan followed by golden-section
/// refinement.
pub fn fit_critical_batch(points: &[(f64, f64)]) -> Result<CriticalBatchFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(b, s)| b > 0.0 && s > 0.0 && b.is_finite() && s.is_finite())
        .collect();
    if pts.len() < 4 {
        return Err(NqmError::Fit(format!(
            "need at least 4 finite (B, steps) points, got {}",
            pts.len()
        )));
    }
    let ln_b: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ln_s: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let (b_min, b_max) = ln_b
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let lo = b_min - 10.0;
    let hi = b_max + 10.0;

    // ln(1 + e^(u - x)) without overflow
    let shape = |u: f64, x: f64| {
        let z = u - x;
        if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        }
    };
    let eval = |u: f64| -> (f64, f64) {
        let n = ln_s.len() as f64;
        let off = ln_s.iter().zip(&ln_b).map(|(s, x)| s - shape(u, *x)).sum::<f64>() / n;
        let sse = ln_s
            .iter()
            .zip(&ln_b)
            .map(|(s, x)| (s - off - shape(u, *x)).powi(2))
            .sum::<f64>();
        (sse, off)
    };

    let n_scan: usize = 400;
    let step = (hi - lo) / n_scan as f64;
    let mut best_k: usize = 0;
    let mut best_sse = f64::INFINITY;
    for k in 0..=n_scan {
        let (sse, _) = eval(lo + k as f64 * step);
        if sse < best_sse {
            best_sse = sse;
            best_k = k;
        }
    }
    let mut a = lo + best_k.saturating_sub(1) as f64 * step;
    let mut b = lo + (best_k + 1).min(n_scan) as f64 * step;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (eval(c).0, eval(d).0);
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 * (1.0 + a.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = eval(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = eval(d).0;
        }
    }
    let u = 0.5 * (a + b);
    let (sse, off) = eval(u);
    let b_crit = u.exp();
    let at_edge = best_k == 0 || best_k == n_scan;
    let degraded = at_edge || u > b_max;
    if degraded {
        log::warn!("critical batch fit is not identified (b_crit = {b_crit:.3e})");
    }
    Ok(CriticalBatchFit {
        b_crit,
        s_infinity: off.exp(),
        residual: (sse / pts.len() as f64).sqrt() / std::f64::consts::LN_10,
        n_points: pts.len(),
        degraded,
    })
}

/// Fit over the reached cells of one family.
pub fn fit_family(records: &[SweepRecord], family: &Family) -> Result<CriticalBatchFit> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.family == *family)
        .filter_map(|r| r.steps.reached().map(|t| (r.batch_size, t as f64)))
        .collect();
    fit_critical_batch(&pts)
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    family: String,
    p: f64,
    #[serde(rename = "B")]
    batch_size: f64,
    steps: Option<u64>,
    lower_bound: f64,
    b_crit: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    frontier_flag: bool,
    error: String,
}

/// Writes sweep rows. `fits` holds one optional fit per family, in the
/// order the families first appear in `records`.
pub fn write_sweep_csv<W: std::io::Write>(
    out: W,
    records: &[SweepRecord],
    fits: &[(Family, Option<CriticalBatchFit>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        let b_crit = fits
            .iter()
            .find(|(f, _)| *f == r.family)
            .and_then(|(_, fit)| fit.as_ref().map(|f| f.b_crit));
        w.serialize(SweepRow {
            family: r.family.rule.as_str().to_string(),
            p: r.family.p,
            batch_size: r.batch_size,
            steps: r.steps.reached(),
            lower_bound: r.lower_bound,
            b_crit,
            alpha: r.best_config.map(|c| c.alpha),
            beta: r.best_config.map(|c| c.beta),
            gamma: r.best_config.map(|c| c.gamma),
            frontier_flag: r.frontier_flag,
            error: r.error.clone().unwrap_or_default(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Distinct families in first-appearance order.
pub fn families_in(records: &[SweepRecord]) -> Vec<Family> {
    let mut out: Vec<Family> = Vec::new();
    for r in records {
        if !out.contains(&r.family) {
            out.push(r.family);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lower_bound_examples() {
        assert_relative_eq!(lower_bound_steps(1e4, 0.01, 1.0).unwrap(), 500_000.0, max_relative = 1e-12);
        assert_relative_eq!(lower_bound_steps(1e4, 0.01, 100.0).unwrap(), 5_000.0, max_relative = 1e-12);
        assert_relative_eq!(lower_bound_steps(10.0, 5.0 / 3.0, 3.0).unwrap(), 1.0, max_relative = 1e-12);
        assert!(lower_bound_steps(10.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn exact_hyperbola_recovered() {
        let pts: Vec<(f64, f64)> = (0..12)
            .map(|k| {
                let b = (1u64 << k) as f64;
                (b, 1000.0 * (1.0 + 64.0 / b))
            })
            .collect();
        let fit = fit_critical_batch(&pts).unwrap();
        assert_relative_eq!(fit.b_crit, 64.0, max_relative = 1e-6);
        assert_relative_eq!(fit.s_infinity, 1000.0, max_relative = 1e-6);
        assert!(fit.residual < 1e-9, "{}", fit.residual);
        assert!(!fit.degraded);
        assert_relative_eq!(fit.predict(64.0), 2000.0, max_relative = 1e-6);
    }

    #[test]
    fn linear_scaling_is_degraded() {
        let pts: Vec<(f64, f64)> = (0..10).map(|k| ((1u64 << k) as f64, 1e6 / (1u64 << k) as f64)).collect();
        let fit = fit_critical_batch(&pts).unwrap();
        assert!(fit.degraded);
        assert!(fit.b_crit > 512.0);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_critical_batch(&[(1.0, 10.0), (2.0, 5.0), (4.0, f64::INFINITY)]),
            Err(NqmError::Fit(_))
        ));
    }

    #[test]
    fn sweep_is_ordered_and_bounded() {
        let s = Spectrum::power(100, true).unwrap();
        let fams = [Family::momentum(), Family::sgd()];
        let bs: Vec<f64> = (0..8).map(|k| (1u64 << k) as f64).collect();
        let recs = sweep(&s, &fams, &bs, 0.05, &SweepOptions::default()).unwrap();
        assert_eq!(recs.len(), 16);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.family, fams[i / 8]);
            assert_eq!(r.batch_size, bs[i % 8]);
            let t = r.steps.reached().unwrap();
            assert!(t as f64 >= r.lower_bound.floor());
        }
        for w in recs.windows(2).filter(|w| w[0].family == w[1].family) {
            assert!(w[1].steps.reached() <= w[0].steps.reached());
        }
        assert_eq!(families_in(&recs), fams.to_vec());
        let mut buf = Vec::new();
        let fits: Vec<_> = fams.iter().map(|f| (*f, fit_family(&recs, f).ok())).collect();
        write_sweep_csv(&mut buf, &recs, &fits).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("family,p,B,steps,lower_bound,b_crit,"));
        assert_eq!(text.lines().count(), 17);
    }

    #[test]
    fn empty_batch_list_rejected() {
        let s = Spectrum::power(10, true).unwrap();
        assert!(sweep(&s, &[Family::sgd()], &[], 0.01, &SweepOptions::default()).is_err());
    }
}
