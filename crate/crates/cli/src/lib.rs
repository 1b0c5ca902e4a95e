//! Pipelines behind the `tvbi` binary: dense training, structured pruning,
//! evaluation, block-format export and benchmarking.

pub mod commands;
pub mod config;
pub mod idx;
pub mod pgm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tvbi::Error),

    #[error("configuration error: {0}")]
    Config(String),
}

impl CliError {
    /// 2 config, 3 data or format, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(tvbi::Error::Config(_) | tvbi::Error::Domain(_)) => 2,
            CliError::Core(tvbi::Error::Format(_) | tvbi::Error::Io(_)) => 3,
            CliError::Core(tvbi::Error::Divergence(_)) => 4,
        }
    }
}
