//! Experiment driver behind the `sgt` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod ordering;

pub use config::ExperimentConfig;
pub use error::{BenchError, Result};
