//! Command-line runner: TOML configs in, CSV tables with JSON sidecars out.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{parse_config, ConfigError, Experiment, ExperimentConfig};
pub use runner::{run, Overrides};
