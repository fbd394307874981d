//! Reproducible command-line runs: every command writes its outputs and a
//! manifest that `replay` can re-execute and verify.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod samples;

pub use commands::{execute, Baseline, Command};
pub use config::{ModelSpec, RunConfig};
pub use manifest::Manifest;
pub use samples::SampleFile;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("missing dependency run: {0}")]
    MissingRun(String),
    #[error("replay mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Internal(String),
    #[error(transparent)]
    Core(#[from] psagan::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 0 ok, 2 config, 3 missing artifact, 4 missing dependency run, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(psagan::Error::Config(_)) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::MissingRun(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
