//! Experiment configuration shared by the command-line verbs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NqmError, Result};
use crate::montecarlo::NoiseKind;
use crate::scaling::default_batch_sizes;
use crate::spectrum::{InitCondition, Spectrum, SpectrumSpec};
use crate::tuning::{Family, Grids, DEFAULT_STEP_CAP, DEFAULT_TARGET};

/// Either the shorthand/path form or an inline spectrum object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpectrumSource {
    Spec(SpectrumSpec),
    Inline(Spectrum),
}

impl SpectrumSource {
    pub fn load(&self) -> Result<Spectrum> {
        match self {
            SpectrumSource::Spec(s) => s.load(),
            SpectrumSource::Inline(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Dimension of the power spectrum used by the sampled checks.
    pub dimension: usize,
    pub steps: usize,
    pub n_trajectories: usize,
    pub noise: NoiseKind,
    /// Random configurations in the bound-inequality suites.
    pub bound_configs: usize,
    pub bound_steps: usize,
    /// Flip the sign of the noise-floor term on the analytic side, to show
    /// the harness catches a wrong formula.
    pub mutation: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            dimension: 10,
            steps: 100,
            n_trajectories: 100_000,
            noise: NoiseKind::Gaussian,
            bound_configs: 500,
            bound_steps: 1000,
            mutation: false,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spectrum: SpectrumSource,
    /// Log-spaced curvature bins; `null` keeps the full spectrum.
    pub bins: Option<usize>,
    /// `rule` or `rule:p`, e.g. `momentum:0.5`.
    pub families: Vec<String>,
    pub batch_sizes: Vec<f64>,
    pub target: f64,
    /// Replaces the per-family default grids.
    pub grids: Option<Grids>,
    pub step_cap: u64,
    pub init_second_moment: f64,
    pub n_pieces: usize,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; `null` uses all cores.
    pub jobs: Option<usize>,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            spectrum: SpectrumSource::Spec(SpectrumSpec::Power { d: 10_000 }),
            bins: Some(100),
            families: ["sgd", "sgd:0.5", "sgd:1", "momentum", "momentum:0.5", "momentum:1", "ema"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            batch_sizes: default_batch_sizes(),
            target: DEFAULT_TARGET,
            grids: None,
            step_cap: DEFAULT_STEP_CAP,
            init_second_moment: 1.0,
            n_pieces: 50,
            out: PathBuf::from("out"),
            seed: 0,
            jobs: None,
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NqmError::Io(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| NqmError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NqmError::InvalidConfig(m));
        if self.batch_sizes.is_empty() {
            return bad("batch_sizes is empty".into());
        }
        if self.batch_sizes.iter().any(|&b| !(b >= 1.0 && b.is_finite()))
            || self.batch_sizes.windows(2).any(|w| !(w[0] < w[1]))
        {
            return bad("batch_sizes must be strictly ascending and at least 1".into());
        }
        if !(self.target > 0.0 && self.target.is_finite()) {
            return bad(format!("target must be positive, got {}", self.target));
        }
        if self.bins == Some(0) {
            return bad("bins must be at least 1".into());
        }
        if self.families.is_empty() {
            return bad("families is empty".into());
        }
        self.parsed_families()?;
        if self.step_cap == 0 {
            return bad("step_cap must be positive".into());
        }
        InitCondition::new(self.init_second_moment).map_err(|e| NqmError::InvalidConfig(e.to_string()))?;
        if self.n_pieces == 0 {
            return bad("n_pieces must be at least 1".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        let v = &self.verify;
        if v.n_trajectories < 2 {
            return bad(format!("verify.n_trajectories must be at least 2, got {}", v.n_trajectories));
        }
        if v.dimension == 0 || v.dimension > 100 {
            return bad(format!("verify.dimension must lie in 1..=100, got {}", v.dimension));
        }
        if v.steps == 0 || v.bound_steps == 0 {
            return bad("verify step counts must be positive".into());
        }
        Ok(())
    }

    pub fn parsed_families(&self) -> Result<Vec<Family>> {
        self.families
            .iter()
            .map(|f| f.parse().map_err(|e: NqmError| NqmError::InvalidConfig(e.to_string())))
            .collect()
    }

    /// The spectrum after optional quantization.
    pub fn load_spectrum(&self) -> Result<Spectrum> {
        let s = self.spectrum.load()?;
        match self.bins {
            Some(n) => s.quantize(n),
            None => Ok(s),
        }
    }

    pub fn init(&self) -> InitCondition {
        InitCondition {
            second_moment: self.init_second_moment,
            mean_zero: true,
        }
    }
}
