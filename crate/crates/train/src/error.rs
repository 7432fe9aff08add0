use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch} (non-finite loss); last good epoch: {}", last_good.map_or("none".to_string(), |e| e.to_string()))]
    Diverged { epoch: usize, last_good: Option<usize> },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("network does not fit the data: {0}")]
    Mismatch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] stn_core::Error),
    #[error(transparent)]
    Data(#[from] stn_data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] stn_core::checkpoint::CheckpointError),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TrainError {
    let path = path.into();
    move |source| TrainError::Io { path, source }
}
