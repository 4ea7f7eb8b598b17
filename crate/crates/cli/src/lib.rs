//! Configuration parsing and experiment drivers behind the `nlfb` binary.

pub mod config;
pub mod run;

pub use config::{parse_config, ExperimentConfig};
pub use run::{run, CliError, Subcommand};
