//! Experiment runner for the `vpy-core` laboratory.

pub mod config;
pub mod experiments;
pub mod stability;

pub use config::Config;
pub use experiments::{config_from_args, exit_code, run, Experiment, RunSummary};
