//! Command-line front end. The binary only parses arguments and calls [`run`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{NqmError, Result};
use crate::plot::{Chart, LogBase, Series};
use crate::scaling::{families_in, fit_family, lower_bound_steps, sweep, write_sweep_csv, CriticalBatchFit, SweepOptions, SweepRecord};
use crate::schedule::{min_steps_with_schedule, OptimizedSchedule, ScheduleOptions};
use crate::tuning::{grid_search, optimal_lr_curve, write_tune_csv, Family, Grids, SearchOptions};
use crate::verify::{bound_suite, sampled_suite, CheckRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "nqm", version, about = "Noisy quadratic model experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Verb,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "NQM_JOBS", value_name = "N")]
    pub jobs: Option<usize>,
    /// Target risk.
    #[arg(long, global = true, value_name = "R")]
    pub target: Option<f64>,
    /// Curvature bins for the spectrum.
    #[arg(long, global = true, value_name = "N")]
    pub bins: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Tuned steps-to-target against batch size for every family.
    Sweep,
    /// Tuned hyperparameters and optimal learning rates per batch size.
    Tune,
    /// Optimized piecewise-constant SGD schedules per batch size.
    Schedule,
    /// Sampled and bound-inequality checks of the exact risk.
    Verify {
        /// Flip the sign of the noise-floor term on the analytic side.
        #[arg(long)]
        mutation: bool,
        /// Sampled trajectories per check.
        #[arg(long, value_name = "N")]
        trajectories: Option<usize>,
    },
    /// Re-render SVG plots from CSV files in the output directory.
    Plot,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = pool.install(|| {
        fs::create_dir_all(&cfg.out).map_err(|e| NqmError::Io(format!("{}: {e}", cfg.out.display())))?;
        match &cli.command {
            Verb::Sweep => run_sweep(&cfg),
            Verb::Tune => run_tune(&cfg),
            Verb::Schedule => run_schedule(&cfg),
            Verb::Verify { .. } => run_verify(&cfg),
            Verb::Plot => run_plot(&cfg.out),
        }
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    let c = &cli.common;
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(j) = c.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(t) = c.target {
        cfg.target = t;
    }
    if let Some(b) = c.bins {
        cfg.bins = Some(b);
    }
    if let Verb::Verify { mutation, trajectories } = &cli.command {
        cfg.verify.mutation |= *mutation;
        if let Some(n) = trajectories {
            cfg.verify.n_trajectories = *n;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| NqmError::Io(format!("{}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> Result<fs::File> {
    let path = dir.join(name);
    fs::File::create(&path).map_err(|e| NqmError::Io(format!("{}: {e}", path.display())))
}

fn search_options(cfg: &ExperimentConfig) -> SearchOptions {
    SearchOptions {
        cap: cfg.step_cap,
        init: cfg.init(),
        ..Default::default()
    }
}

#[derive(Debug, Serialize)]
struct FitSummary {
    family: String,
    rule: String,
    p: f64,
    fit: Option<CriticalBatchFit>,
    error: Option<String>,
}

fn run_sweep(cfg: &ExperimentConfig) -> Result<i32> {
    let s = cfg.load_spectrum()?;
    let families = cfg.parsed_families()?;
    let opts = SweepOptions {
        search: search_options(cfg),
        grids: cfg.grids.clone(),
    };
    let records = sweep(&s, &families, &cfg.batch_sizes, cfg.target, &opts)?;
    let fits: Vec<(Family, Option<CriticalBatchFit>)> = families_in(&records)
        .into_iter()
        .map(|f| (f, fit_family(&records, &f).ok()))
        .collect();
    let summaries: Vec<FitSummary> = families_in(&records)
        .iter()
        .map(|f| {
            let r = fit_family(&records, f);
            FitSummary {
                family: f.label(),
                rule: f.rule.as_str().into(),
                p: f.p,
                error: r.as_ref().err().map(|e| e.to_string()),
                fit: r.ok(),
            }
        })
        .collect();
    write_sweep_csv(create(&cfg.out, "sweep.csv")?, &records, &fits)?;
    write_file(&cfg.out, "fits.json", serde_json::to_string_pretty(&summaries)?.as_bytes())?;
    write_file(&cfg.out, "config.json", cfg.to_json()?.as_bytes())?;
    let rows: Vec<PlotRow> = records.iter().map(PlotRow::from).collect();
    write_file(&cfg.out, "sweep.svg", sweep_chart(&rows, cfg.target).render().as_bytes())?;
    for (f, fit) in &fits {
        match fit {
            Some(fit) => println!(
                "{:<18} b_crit {:>12.4e}  s_inf {:>10.4e}  residual {:.4}{}",
                f.label(),
                fit.b_crit,
                fit.s_infinity,
                fit.residual,
                if fit.degraded { "  (degraded)" } else { "" }
            ),
            None => println!("{:<18} no fit", f.label()),
        }
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} sweep cells failed; see sweep.csv");
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

/// The columns of `sweep.csv` needed for plotting.
#[derive(Debug, Clone, Deserialize)]
struct PlotRow {
    family: String,
    p: f64,
    #[serde(rename = "B")]
    batch_size: f64,
    steps: Option<u64>,
    lower_bound: f64,
}

impl From<&SweepRecord> for PlotRow {
    fn from(r: &SweepRecord) -> Self {
        PlotRow {
            family: r.family.rule.as_str().into(),
            p: r.family.p,
            batch_size: r.batch_size,
            steps: r.steps.reached(),
            lower_bound: r.lower_bound,
        }
    }
}

fn sweep_chart(rows: &[PlotRow], target: f64) -> Chart {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let label = format!("{} p={}", r.family, r.p);
        let idx = match series.iter().position(|s| s.label == label) {
            Some(i) => i,
            None => {
                series.push(Series {
                    label: label.clone(),
                    points: Vec::new(),
                    dashed: r.family == "sgd",
                });
                series.len() - 1
            }
        };
        if let Some(t) = r.steps {
            series[idx].points.push((r.batch_size, t as f64));
        }
    }
    let mut bound: Vec<(f64, f64)> = rows.iter().map(|r| (r.batch_size, r.lower_bound)).collect();
    bound.sort_by(|a, b| a.0.total_cmp(&b.0));
    bound.dedup_by(|a, b| a.0 == b.0);
    series.push(Series {
        label: "lower bound".into(),
        points: bound,
        dashed: true,
    });
    Chart {
        title: format!("Steps to reach risk {target}"),
        x_label: "batch size".into(),
        y_label: "steps".into(),
        x_base: LogBase::Two,
        y_base: LogBase::Ten,
        series,
    }
}

fn run_tune(cfg: &ExperimentConfig) -> Result<i32> {
    let s = cfg.load_spectrum()?;
    let opts = search_options(cfg);
    let mut results = Vec::new();
    let mut failed = 0;
    let mut series = Vec::new();
    for f in cfg.parsed_families()? {
        let grids = match &cfg.grids {
            Some(g) => g.clone(),
            None => Grids::default_for(&s, f.p)?,
        };
        let curve = optimal_lr_curve(&s, &cfg.batch_sizes, cfg.target, f, &grids, &opts)?;
        let mut pts = Vec::new();
        for p in &curve {
            match (&p.result, &p.error) {
                (Some(r), _) => {
                    pts.push((p.batch_size, r.effective_lr));
                    results.push(r.clone());
                }
                (None, Some(e)) => {
                    failed += 1;
                    eprintln!("{} B={}: {e}", f.label(), p.batch_size);
                }
                (None, None) => {}
            }
        }
        series.push(Series {
            label: format!("{} (effective)", f.label()),
            points: pts,
            dashed: f.rule == crate::dynamics::UpdateRule::Sgd,
        });
    }
    write_tune_csv(create(&cfg.out, "tune.csv")?, &results)?;
    write_file(&cfg.out, "config.json", cfg.to_json()?.as_bytes())?;
    let chart = Chart {
        title: "Optimal learning rate".into(),
        x_label: "batch size".into(),
        y_label: "alpha / (1 - beta)".into(),
        x_base: LogBase::Two,
        y_base: LogBase::Ten,
        series,
    };
    write_file(&cfg.out, "lr.svg", chart.render().as_bytes())?;
    Ok(if failed > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

#[derive(Debug, Serialize, Deserialize)]
struct ScheduleSummary {
    #[serde(rename = "B")]
    batch_size: f64,
    schedule_steps: Option<u64>,
    constant_steps: Option<u64>,
    lower_bound: f64,
    first_alpha: Option<f64>,
    final_alpha: Option<f64>,
    error: String,
}

#[derive(Debug, Serialize)]
struct ScheduleEntry {
    #[serde(rename = "B")]
    batch_size: f64,
    steps: Option<u64>,
    optimized: Option<OptimizedSchedule>,
    error: Option<String>,
}

fn run_schedule(cfg: &ExperimentConfig) -> Result<i32> {
    let s = cfg.load_spectrum()?;
    let search = search_options(cfg);
    let sched_opts = ScheduleOptions {
        init: cfg.init(),
        cap: cfg.step_cap,
        ..Default::default()
    };
    let grids = match &cfg.grids {
        Some(g) => g.clone(),
        None => Grids::default_for(&s, 0.0)?,
    };
    let d = s.d_effective();
    let cells: Vec<(ScheduleEntry, ScheduleSummary)> = cfg
        .batch_sizes
        .par_iter()
        .with_max_len(1)
        .map(|&b| {
            let constant = grid_search(&s, b, cfg.target, Family::sgd(), &grids, &search);
            let opt = min_steps_with_schedule(&s, b, cfg.target, cfg.n_pieces, &sched_opts);
            let lower_bound = lower_bound_steps(d, cfg.target, b).unwrap_or(f64::NAN);
            let mut errors = Vec::new();
            if let Err(e) = &constant {
                errors.push(e.to_string());
            }
            if let Err(e) = &opt {
                errors.push(e.to_string());
            }
            let alphas = opt.as_ref().ok().map(|(_, o)| o.schedule.alphas());
            let summary = ScheduleSummary {
                batch_size: b,
                schedule_steps: opt.as_ref().ok().map(|(t, _)| *t),
                constant_steps: constant.as_ref().ok().and_then(|r| r.steps.reached()),
                lower_bound,
                first_alpha: alphas.as_ref().and_then(|a| a.first().copied()),
                final_alpha: alphas.as_ref().and_then(|a| a.last().copied()),
                error: errors.join("; "),
            };
            let entry = match opt {
                Ok((t, o)) => ScheduleEntry {
                    batch_size: b,
                    steps: Some(t),
                    optimized: Some(o),
                    error: None,
                },
                Err(e) => ScheduleEntry {
                    batch_size: b,
                    steps: None,
                    optimized: None,
                    error: Some(e.to_string()),
                },
            };
            (entry, summary)
        })
        .collect();

    let mut w = csv::Writer::from_writer(create(&cfg.out, "schedule_summary.csv")?);
    for (_, s) in &cells {
        w.serialize(s)?;
    }
    w.flush()?;
    for (e, _) in &cells {
        if let Some(o) = &e.optimized {
            let name = format!("schedule_B{}.csv", e.batch_size);
            o.schedule.write_csv(std::io::BufWriter::new(create(&cfg.out, &name)?))?;
        }
    }
    let (entries, summaries): (Vec<ScheduleEntry>, Vec<ScheduleSummary>) = cells.into_iter().unzip();
    write_file(&cfg.out, "schedules.json", serde_json::to_string_pretty(&entries)?.as_bytes())?;
    write_file(&cfg.out, "config.json", cfg.to_json()?.as_bytes())?;
    write_schedule_plots(&cfg.out, &summaries, &entries)?;
    for s in &summaries {
        println!(
            "B={:<8} schedule {:>10}  constant {:>10}  bound {:>12.1}",
            s.batch_size,
            s.schedule_steps.map_or("-".into(), |t| t.to_string()),
            s.constant_steps.map_or("-".into(), |t| t.to_string()),
            s.lower_bound
        );
    }
    Ok(if summaries.iter().any(|s| !s.error.is_empty()) {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

fn schedule_steps_chart(summaries: &[ScheduleSummary]) -> Chart {
    let pick = |f: &dyn Fn(&ScheduleSummary) -> Option<f64>| -> Vec<(f64, f64)> {
        summaries.iter().filter_map(|s| f(s).map(|v| (s.batch_size, v))).collect()
    };
    Chart {
        title: "Steps with optimized schedules".into(),
        x_label: "batch size".into(),
        y_label: "steps".into(),
        x_base: LogBase::Two,
        y_base: LogBase::Ten,
        series: vec![
            Series {
                label: "schedule".into(),
                points: pick(&|s| s.schedule_steps.map(|t| t as f64)),
                dashed: false,
            },
            Series {
                label: "constant".into(),
                points: pick(&|s| s.constant_steps.map(|t| t as f64)),
                dashed: false,
            },
            Series {
                label: "lower bound".into(),
                points: pick(&|s| Some(s.lower_bound)),
                dashed: true,
            },
        ],
    }
}

fn final_alpha_chart(summaries: &[ScheduleSummary]) -> Chart {
    Chart {
        title: "Final learning rate of optimized schedules".into(),
        x_label: "batch size".into(),
        y_label: "final alpha".into(),
        x_base: LogBase::Two,
        y_base: LogBase::Ten,
        series: vec![Series {
            label: "final alpha".into(),
            points: summaries
                .iter()
                .filter_map(|s| s.final_alpha.map(|a| (s.batch_size, a)))
                .collect(),
            dashed: false,
        }],
    }
}

fn write_schedule_plots(out: &Path, summaries: &[ScheduleSummary], entries: &[ScheduleEntry]) -> Result<()> {
    write_file(out, "schedule_steps.svg", schedule_steps_chart(summaries).render().as_bytes())?;
    write_file(out, "final_alpha.svg", final_alpha_chart(summaries).render().as_bytes())?;
    if entries.is_empty() {
        return Ok(());
    }
    let series = entries
        .iter()
        .filter_map(|e| {
            let o = e.optimized.as_ref()?;
            let mut t = 0u64;
            let mut pts = Vec::new();
            for p in &o.schedule.pieces {
                pts.push(((t + 1) as f64, p.alpha));
                t += p.len;
                pts.push((t as f64, p.alpha));
            }
            Some(Series {
                label: format!("B={}", e.batch_size),
                points: pts,
                dashed: false,
            })
        })
        .collect();
    let chart = Chart {
        title: "Optimized learning-rate schedules".into(),
        x_label: "step".into(),
        y_label: "alpha".into(),
        x_base: LogBase::Ten,
        y_base: LogBase::Ten,
        series,
    };
    write_file(out, "schedules.svg", chart.render().as_bytes())
}

fn run_verify(cfg: &ExperimentConfig) -> Result<i32> {
    let mut rows: Vec<CheckRow> = sampled_suite(&cfg.verify, cfg.seed)?;
    rows.extend(bound_suite(cfg.verify.bound_configs, cfg.verify.bound_steps, cfg.seed)?);
    let mut w = csv::Writer::from_writer(create(&cfg.out, "verify.csv")?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut stdout = std::io::stdout().lock();
    for r in &rows {
        let _ = writeln!(
            stdout,
            "{:<4} {:<24} statistic {:>12.4e}  threshold {:.1e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.suite,
            r.statistic,
            r.threshold
        );
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        let _ = writeln!(stdout, "{failed} check(s) failed");
        return Ok(EXIT_VERIFY);
    }
    Ok(EXIT_OK)
}

fn run_plot(out: &Path) -> Result<i32> {
    let mut drawn = 0;
    let sweep_csv = out.join("sweep.csv");
    if sweep_csv.exists() {
        let mut r = csv::Reader::from_path(&sweep_csv)?;
        let rows: Vec<PlotRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let target = read_target(out).unwrap_or(crate::tuning::DEFAULT_TARGET);
        write_file(out, "sweep.svg", sweep_chart(&rows, target).render().as_bytes())?;
        drawn += 1;
    }
    let sched_csv = out.join("schedule_summary.csv");
    if sched_csv.exists() {
        let mut r = csv::Reader::from_path(&sched_csv)?;
        let rows: Vec<ScheduleSummary> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        write_file(out, "schedule_steps.svg", schedule_steps_chart(&rows).render().as_bytes())?;
        write_file(out, "final_alpha.svg", final_alpha_chart(&rows).render().as_bytes())?;
        drawn += 1;
    }
    if drawn == 0 {
        return Err(NqmError::InvalidConfig(format!(
            "nothing to plot: no sweep.csv or schedule_summary.csv in {}",
            out.display()
        )));
    }
    Ok(EXIT_OK)
}

fn read_target(out: &Path) -> Option<f64> {
    let text = fs::read_to_string(out.join("config.json")).ok()?;
    serde_json::from_str::<ExperimentConfig>(&text).ok().map(|c| c.target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_flags_after_verb() {
        let cli = Cli::try_parse_from(["nqm", "sweep", "--target", "0.05", "--bins", "20", "--seed", "3"]).unwrap();
        assert!(matches!(cli.command, Verb::Sweep));
        assert_eq!(cli.common.target, Some(0.05));
        assert_eq!(cli.common.bins, Some(20));
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.target, 0.05);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn verify_flags_override_config() {
        let cli = Cli::try_parse_from(["nqm", "verify", "--mutation", "--trajectories", "50"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert!(cfg.verify.mutation);
        assert_eq!(cfg.verify.n_trajectories, 50);
        let cli = Cli::try_parse_from(["nqm", "verify", "--trajectories", "0"]).unwrap();
        assert!(resolve_config(&cli).is_err());
    }
}
