//! Experiment runner for `nmrl`: configuration, multi-seed orchestration,
//! artifact output with a hashed manifest, and reporting.

pub mod config;
pub mod error;
pub mod output;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
