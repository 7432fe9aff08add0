//! Run directories: `<config hash>-s<seed>/` holding the resolved config,
//! the report and the best checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use stn_core::checkpoint;
use stn_core::Scalar;
use stn_data::Dataset;

use crate::config::{ExperimentConfig, Precision};
use crate::error::{io_err, Result};
use crate::train::{train, RunReport, TrainOutcome};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// First 16 hex digits of the SHA-256 of the config's JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(root.join(format!("{}-s{}", config_hash(cfg)?, cfg.train.seed)))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes config, report and checkpoint under `dir`.
pub fn save_run<T: Scalar>(dir: &Path, cfg: &ExperimentConfig, outcome: &TrainOutcome<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    write_json(&dir.join(REPORT_FILE), &outcome.report)?;
    checkpoint::save(&outcome.network, &dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_as<T: Scalar>(dataset: &Dataset, cfg: &ExperimentConfig, root: Option<&Path>) -> Result<(RunReport, Option<PathBuf>)> {
    let outcome = train::<T>(dataset, &cfg.network, &cfg.train)?;
    let dir = match root {
        Some(root) => {
            let dir = run_dir(root, cfg)?;
            save_run(&dir, cfg, &outcome)?;
            Some(dir)
        }
        None => None,
    };
    Ok((outcome.report, dir))
}

/// Trains in the configured precision and, given a root, saves the run
/// directory there.
pub fn run_experiment(dataset: &Dataset, cfg: &ExperimentConfig, root: Option<&Path>) -> Result<(RunReport, Option<PathBuf>)> {
    match cfg.train.precision {
        Precision::F32 => run_as::<f32>(dataset, cfg, root),
        Precision::F64 => run_as::<f64>(dataset, cfg, root),
    }
}
