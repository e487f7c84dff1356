//! Experiment runner for federated linear SARSA: TOML run configs, text model formats,
//! CSV run records, the acceptance checks behind `fedsarsa verify`, and a rayon executor.

pub mod checks;
pub mod config;
pub mod experiment;
pub mod formats;
pub mod parallel;

pub use config::{ConfigError, RunConfig};
pub use experiment::{
    compute_reference, constants_report, run_suite, Experiment, RunError, RunOptions, RunRecord, CSV_HEADER,
};
pub use parallel::RayonExecutor;
