//! Config-driven experiment runner for the `kinlab` library.

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_config, CommandKind, ConfigError, ExperimentPlan};
pub use run::{run, Format, RunError};
