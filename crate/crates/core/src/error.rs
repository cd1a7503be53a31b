use thiserror::Error;

pub type Result<T, E = NqmError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NqmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),

    /// A learning rate pushes some curvature outside the stable region.
    #[error("unstable: learning rate {alpha} is not stable for eigenvalue h = {h}{}", step_suffix(*.step))]
    Unstable { alpha: f64, h: f64, step: Option<usize> },

    #[error("diverged at step {step}")]
    Diverged { step: usize },

    #[error("target {target} is unreachable: {reason}")]
    Unreachable { target: f64, reason: String },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(s) => format!(" (schedule step {s})"),
        None => String::new(),
    }
}

impl From<std::io::Error> for NqmError {
    fn from(e: std::io::Error) -> Self {
        NqmError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for NqmError {
    fn from(e: serde_json::Error) -> Self {
        NqmError::Parse(e.to_string())
    }
}

impl From<csv::Error> for NqmError {
    fn from(e: csv::Error) -> Self {
        NqmError::Io(e.to_string())
    }
}
