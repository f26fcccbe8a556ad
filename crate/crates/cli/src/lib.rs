//! Experiment runner: configs, orchestration, persistence and figures.

pub mod combine;
pub mod config;
pub mod ood;
pub mod runner;
pub mod svg;

use thiserror::Error;

pub use config::{ExperimentConfig, SchemaErrors};
pub use runner::RunOptions;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n{0}")]
    Schema(#[from] SchemaErrors),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] lmc_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for bad input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
