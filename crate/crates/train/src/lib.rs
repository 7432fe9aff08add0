//! Optimization, evaluation, run directories and ablation sweeps.

pub mod ablation;
pub mod adam;
pub mod config;
pub mod error;
pub mod run;
pub mod train;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use config::{ExperimentConfig, Precision, TrainConfig};
pub use error::{Result, TrainError};
pub use train::{evaluate, evaluate_split, examples, train, train_from, train_step, Example, Metrics, RunReport, TrainOutcome};
