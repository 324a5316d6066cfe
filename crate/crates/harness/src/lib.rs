//! Experiment harness for budgeted channel-sparse fine-tuning: configuration,
//! datasets, training runs, checkpoints and report artifacts.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod output;
pub mod sweep;

pub use config::{Budget, DataSource, ExperimentConfig, NetworkChoice, PoolSource};
pub use error::{HarnessError, Result};
pub use experiment::{EpochRow, RunRecord};
