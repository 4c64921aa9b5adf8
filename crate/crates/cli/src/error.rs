use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] relm_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("hash mismatch for {path}: recorded {expected}, found {found}")]
    Hash {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(relm_core::Error::Checkpoint(_)) => "checkpoint",
            CliError::Core(_) => "core",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Manifest(_) => "manifest",
            CliError::Hash { .. } => "hash",
            CliError::Usage(_) => "usage",
        }
    }

    /// Single-line JSON record for standard error.
    pub fn to_json_line(&self) -> String {
        let message = self.to_string().replace('\n', " ");
        serde_json::json!({ "status": "error", "kind": self.kind(), "message": message }).to_string()
    }
}
