//! Diagonal curvature/noise spectra that define a noisy quadratic instance.
//!
//! A [`Spectrum`] is a list of `(h, c, w)` triples: curvature `h`, gradient
//! noise variance `c`, and a multiplicity weight `w`. Weights let a quantized
//! spectrum stand in for many identical coordinates. Entries are kept sorted
//! by `h`, largest first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NqmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub h: f64,
    pub c: f64,
    #[serde(rename = "w")]
    pub weight: f64,
}

impl Entry {
    pub fn new(h: f64, c: f64, weight: f64) -> Self {
        Entry { h, c, weight }
    }

    fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(NqmError::InvalidSpectrum(format!(
                "curvature must be positive and finite, got {}",
                self.h
            )));
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(NqmError::InvalidSpectrum(format!(
                "noise must be non-negative and finite, got {}",
                self.c
            )));
        }
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(NqmError::InvalidSpectrum(format!(
                "weight must be positive and finite, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpectrum", into = "RawSpectrum")]
pub struct Spectrum {
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct RawSpectrum {
    entries: Vec<Entry>,
}

impl TryFrom<RawSpectrum> for Spectrum {
    type Error = NqmError;

    fn try_from(raw: RawSpectrum) -> Result<Self> {
        Spectrum::new(raw.entries)
    }
}

impl From<Spectrum> for RawSpectrum {
    fn from(s: Spectrum) -> Self {
        RawSpectrum { entries: s.entries }
    }
}

impl Spectrum {
    /// Validates the entries and sorts them by curvature, largest first.
    pub fn new(mut entries: Vec<Entry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(NqmError::InvalidSpectrum("spectrum has no entries".into()));
        }
        for e in &entries {
            e.validate()?;
        }
        sort_descending(&mut entries);
        Ok(Spectrum { entries })
    }

    /// `h_i = 1/i` for `i = 1..=d`, with `C = H` when `noise_equals_curvature`
    /// and a noiseless instance otherwise. Use [`Spectrum::power_with_noise`]
    /// to supply the noise explicitly.
    pub fn power(d: usize, noise_equals_curvature: bool) -> Result<Self> {
        if d == 0 {
            return Err(NqmError::InvalidArgument("dimension must be at least 1".into()));
        }
        let entries = (1..=d)
            .map(|i| {
                let h = 1.0 / i as f64;
                Entry::new(h, if noise_equals_curvature { h } else { 0.0 }, 1.0)
            })
            .collect();
        Ok(Spectrum { entries })
    }

    /// `h_i = 1/i` with per-coordinate noise `noise[i-1]`.
    pub fn power_with_noise(noise: &[f64]) -> Result<Self> {
        if noise.is_empty() {
            return Err(NqmError::InvalidArgument("dimension must be at least 1".into()));
        }
        let entries = noise
            .iter()
            .enumerate()
            .map(|(i, &c)| Entry::new(1.0 / (i + 1) as f64, c, 1.0))
            .collect();
        Spectrum::new(entries)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of the multiplicity weights.
    pub fn d_effective(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    pub fn h_max(&self) -> f64 {
        self.entries[0].h
    }

    pub fn h_min(&self) -> f64 {
        self.entries[self.entries.len() - 1].h
    }

    pub fn condition_number(&self) -> f64 {
        self.h_max() / self.h_min()
    }

    /// True when every entry stands for exactly one coordinate.
    pub fn is_unit_weight(&self) -> bool {
        self.entries.iter().all(|e| e.weight == 1.0)
    }

    /// True when `c == h` for every entry.
    pub fn noise_equals_curvature(&self) -> bool {
        self.entries.iter().all(|e| e.c == e.h)
    }

    /// Collapses the spectrum into at most `n_bins` log-spaced curvature bins.
    ///
    /// Each non-empty bin becomes one entry whose `h` and `c` are the
    /// weight-averaged member values and whose weight is the member weight.
    /// The arithmetic mean keeps `sum(w * h)` per bin, so the initial risk is
    /// unchanged. A request for at least as many bins as entries returns the
    /// spectrum as is.
    pub fn quantize(&self, n_bins: usize) -> Result<Spectrum> {
        if n_bins == 0 {
            return Err(NqmError::InvalidArgument("need at least one bin".into()));
        }
        if n_bins >= self.entries.len() {
            return Ok(self.clone());
        }
        let lo = self.h_min().ln();
        let hi = self.h_max().ln();
        let width = (hi - lo) / n_bins as f64;

        // (sum w, sum w*h, sum w*c) per bin
        let mut acc = vec![(0.0f64, 0.0f64, 0.0f64); n_bins];
        for e in &self.entries {
            let idx = if width > 0.0 {
                (((e.h.ln() - lo) / width).floor() as usize).min(n_bins - 1)
            } else {
                0
            };
            let a = &mut acc[idx];
            a.0 += e.weight;
            a.1 += e.weight * e.h;
            a.2 += e.weight * e.c;
        }
        let entries: Vec<Entry> = acc
            .into_iter()
            .rev()
            .filter(|a| a.0 > 0.0)
            .map(|(w, wh, wc)| Entry::new(wh / w, wc / w, w))
            .collect();
        Spectrum::new(entries)
    }

    /// The spectrum seen by SGD preconditioned with `P = H^p`:
    /// `h -> h^(1-p)` and `c -> c * h^(-p)`, weights unchanged.
    pub fn precondition(&self, p: f64) -> Result<Spectrum> {
        check_power(p)?;
        let mut entries: Vec<Entry> = self
            .entries
            .iter()
            .map(|e| precondition_entry(e, p))
            .collect();
        sort_descending(&mut entries);
        Ok(Spectrum { entries })
    }
}

pub(crate) fn check_power(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NqmError::InvalidArgument(format!(
            "preconditioner power must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

pub(crate) fn precondition_entry(e: &Entry, p: f64) -> Entry {
    if p == 0.0 {
        return *e;
    }
    Entry::new(e.h.powf(1.0 - p), e.c * e.h.powf(-p), e.weight)
}

fn sort_descending(entries: &mut [Entry]) {
    // stable, so ties keep their input order
    entries.sort_by(|a, b| b.h.total_cmp(&a.h));
}

/// Second moment `A(theta(0)) = E[theta(0)]^2 + V[theta(0)]`, shared by
/// every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitCondition {
    pub second_moment: f64,
    /// Zero-mean Gaussian start when true, deterministic `sqrt(second_moment)`
    /// otherwise. Only the Monte Carlo sampler distinguishes the two.
    pub mean_zero: bool,
}

impl Default for InitCondition {
    fn default() -> Self {
        InitCondition {
            second_moment: 1.0,
            mean_zero: true,
        }
    }
}

impl InitCondition {
    pub fn new(second_moment: f64) -> Result<Self> {
        if !(second_moment.is_finite() && second_moment >= 0.0) {
            return Err(NqmError::InvalidArgument(format!(
                "initial second moment must be non-negative, got {second_moment}"
            )));
        }
        Ok(InitCondition {
            second_moment,
            mean_zero: true,
        })
    }
}

/// Spectrum source accepted on the command line and in configs: either the
/// `power:d=N` shorthand or a path to a JSON spectrum file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SpectrumSpec {
    Power { d: usize },
    File(String),
}

impl SpectrumSpec {
    pub fn load(&self) -> Result<Spectrum> {
        match self {
            SpectrumSpec::Power { d } => Spectrum::power(*d, true),
            SpectrumSpec::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| NqmError::Io(format!("{path}: {e}")))?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }
}

impl FromStr for SpectrumSpec {
    type Err = NqmError;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("power:") else {
            return Ok(SpectrumSpec::File(s.to_string()));
        };
        let d = rest
            .split(',')
            .find_map(|kv| kv.trim().strip_prefix("d="))
            .ok_or_else(|| NqmError::Parse(format!("missing d= in spectrum shorthand {s:?}")))?;
        let d: usize = d
            .parse()
            .map_err(|_| NqmError::Parse(format!("bad dimension in {s:?}")))?;
        if d == 0 {
            return Err(NqmError::InvalidArgument("dimension must be at least 1".into()));
        }
        Ok(SpectrumSpec::Power { d })
    }
}

impl fmt::Display for SpectrumSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectrumSpec::Power { d } => write!(f, "power:d={d}"),
            SpectrumSpec::File(p) => f.write_str(p),
        }
    }
}

impl From<SpectrumSpec> for String {
    fn from(s: SpectrumSpec) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SpectrumSpec {
    type Error = NqmError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}
