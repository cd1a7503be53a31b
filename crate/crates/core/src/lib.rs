//! Exact simulation and analysis of the noisy quadratic model (NQM) of
//! neural-network training.
//!
//! The NQM is a diagonal quadratic `L(theta) = sum_i h_i theta_i^2 / 2`
//! optimized with gradients corrupted by noise of variance `c_i / B`. Its
//! expected risk under SGD, momentum, preconditioning and iterate averaging
//! can be computed exactly, which makes it a cheap laboratory for
//! batch-size scaling, learning-rate tuning and schedule design.

pub mod bfgs;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod evaluator;
pub mod montecarlo;
pub mod plot;
pub mod scaling;
pub mod schedule;
pub mod spectrum;
pub mod tuning;
pub mod verify;

pub use dynamics::{OptimizerConfig, RiskTrajectory, UpdateRule};
pub use error::{NqmError, Result};
pub use evaluator::RiskModel;
pub use spectrum::{Entry, InitCondition, Spectrum, SpectrumSpec};
pub use tuning::{Family, Steps, TuneResult};
