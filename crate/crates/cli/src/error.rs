use std::path::{Path, PathBuf};

use thiserror::Error;
use trace_core::TraceError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] TraceError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing upstream artifact {path} (run `trace {producer}` first)")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
