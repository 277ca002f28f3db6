//! Configuration and stage runners behind the `discrec` command.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{load_config, ExperimentConfig, SEED_ENV};
pub use error::CliError;
