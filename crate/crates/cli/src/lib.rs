//! Experiment driver for ddlab: JSON run configs, the experiment suite as
//! subcommands, and the run manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;
