use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,
    #[error("degenerate transform: Frobenius norm {0:e} is below 1e-12")]
    DegenerateTransform(f64),
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),
    #[error("k-NN with k = {k} needs at least k + 1 points, got {n}")]
    InsufficientPoints { k: usize, n: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{context}: expected width {expected}, got {actual}")]
    WidthMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} out of range for {num_parts} parts")]
    LabelOutOfRange { label: usize, num_parts: usize },
    #[error("invalid network config: {0}")]
    Config(String),
}
