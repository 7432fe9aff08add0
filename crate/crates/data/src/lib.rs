//! Synthetic part-labelled shapes, dataset files, segmentation metrics and
//! neighborhood statistics.

pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod shapes;
pub mod stats;

pub use dataset::{make_dataset, Dataset, DatasetConfig, Split};
pub use error::{DataError, Result};
pub use shapes::{gen_shape, Augment, ShapeKind};
