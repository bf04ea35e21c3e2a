//! Experiment harness for the calibration study: on-disk formats, run
//! configuration, the cross-validated pipeline, report emission and the CLI.

pub mod bundle;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod format;
pub mod report;

pub use config::{ConfigError, RunConfig};
pub use experiment::{run_experiment, ResultsTable};
pub use format::FormatError;
