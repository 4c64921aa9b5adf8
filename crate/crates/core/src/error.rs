use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid UTF-8")]
    Decode { path: PathBuf, line: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no data: {0}")]
    EmptyData(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("unknown language tag {0}")]
    UnknownLanguage(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a RELM checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("checkpoint config mismatch on field `{field}`: file has {found}, expected {expected}")]
    ConfigMismatch {
        field: String,
        found: String,
        expected: String,
    },
    #[error("checkpoint vocabulary has {vocab} entries but embedding has {rows} rows")]
    VocabMismatch { vocab: usize, rows: usize },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind {
        found: &'static str,
        expected: &'static str,
    },
}
