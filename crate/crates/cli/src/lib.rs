//! Experiment harness for cycled memory networks: config files, result
//! records, curves and checkpoints behind the `cmn` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod curves;
pub mod error;
pub mod experiment;
pub mod io;
pub mod record;

pub use config::{ExperimentConfig, Method};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, run_seed, ExperimentOutput, RunOptions};
pub use record::{MetricsFile, ResultRecord};
