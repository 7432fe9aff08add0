use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: label {label} out of range for {parts} parts")]
    LabelOutOfRange { line: usize, label: usize, parts: usize },
    #[error("unknown shape kind '{0}' (expected table, rocket, earphone or lamp)")]
    UnknownKind(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error(transparent)]
    Core(#[from] stn_core::Error),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}
