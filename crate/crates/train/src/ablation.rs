//! Sweeps over the number of transformers per block and over which block
//! keeps its learned transformers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use stn_core::{BlockConfig, NetworkConfig, TransformFamily, TransformerSpec};
use stn_data::Dataset;

use crate::config::ExperimentConfig;
use crate::error::{Result, TrainError};
use crate::run::run_experiment;

/// Transformer counts of the graph sweep; `None` is the fixed-graph baseline.
pub const GRAPH_COUNTS: [Option<usize>; 4] = [None, Some(1), Some(2), Some(4)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub regime: String,
    pub variant: String,
    /// Transformers per block.
    pub k: usize,
    /// Sub-feature width per transformer.
    pub f: usize,
    pub seed: u64,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("regime,variant,k,f,seed,val_metric,test_metric\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.regime,
                r.variant,
                r.k,
                r.f,
                r.seed,
                opt(r.val_metric),
                opt(r.test_metric)
            )
            .unwrap();
        }
        s
    }

    /// True when every row has a finite test metric.
    pub fn is_complete(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.test_metric.is_some_and(f64::is_finite))
    }
}

/// Widths of the graph sweep. The first regime fixes `f`; the second fixes
/// the product `k·f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSweep {
    pub fixed_f: usize,
    pub budget: usize,
}

impl Default for GraphSweep {
    fn default() -> Self {
        Self { fixed_f: 32, budget: 64 }
    }
}

fn with_blocks(base: &NetworkConfig, family: TransformFamily, k: usize, f: usize) -> NetworkConfig {
    let mut cfg = base.clone();
    for b in &mut cfg.blocks {
        *b = BlockConfig::uniform(family, k, f, b.k_nn);
    }
    cfg
}

/// The eight network configurations of the graph sweep, labelled
/// `(regime, variant, k, f)`.
pub fn graph_sweep_configs(base: &NetworkConfig, family: TransformFamily, sweep: GraphSweep) -> Result<Vec<(String, String, usize, NetworkConfig)>> {
    if sweep.fixed_f == 0 || !sweep.budget.is_multiple_of(4) || sweep.budget == 0 {
        return Err(TrainError::Config(format!(
            "graph sweep needs f > 0 and a width budget divisible by 4, got {sweep:?}"
        )));
    }
    let mut out = Vec::new();
    for (regime, width) in [
        (format!("f={}", sweep.fixed_f), None),
        (format!("k*f={}", sweep.budget), Some(sweep.budget)),
    ] {
        for count in GRAPH_COUNTS {
            let k = count.unwrap_or(1);
            let f = width.map_or(sweep.fixed_f, |b| b / k);
            let (variant, fam) = match count {
                None => ("fixed".to_string(), TransformFamily::Fixed),
                Some(k) => (k.to_string(), family),
            };
            out.push((regime.clone(), variant, f, with_blocks(base, fam, k, f)));
        }
    }
    Ok(out)
}

fn run_row(dataset: &Dataset, exp: &ExperimentConfig, regime: String, variant: String) -> Result<AblationRow> {
    let (report, _) = run_experiment(dataset, exp, None)?;
    let best = report.epochs.iter().find(|e| e.epoch == report.best_epoch);
    let first = &exp.network.blocks[0];
    Ok(AblationRow {
        regime,
        variant,
        k: first.transformers.len(),
        f: first.transformers[0].sub_feature_width,
        seed: exp.train.seed,
        val_metric: best.and_then(|e| e.val_metric),
        test_metric: report.test.map(|m| m.metric),
    })
}

/// Trains every graph-sweep configuration once per seed. `base.network`
/// supplies depth, head and `k_nn`; `family` is the learned family.
pub fn ablation_graphs(dataset: &Dataset, base: &ExperimentConfig, family: TransformFamily, sweep: GraphSweep, seeds: &[u64]) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for (regime, variant, _, net) in graph_sweep_configs(&base.network, family, sweep)? {
        for &seed in seeds {
            let mut exp = base.clone();
            exp.network = net.clone();
            exp.network.seed = seed;
            exp.train.seed = seed;
            table.rows.push(run_row(dataset, &exp, regime.clone(), variant.clone())?);
        }
    }
    Ok(table)
}

/// `base` with every transformer of block `t` switched to the fixed graph.
pub fn without_layer(base: &NetworkConfig, t: usize) -> NetworkConfig {
    let mut cfg = base.clone();
    for spec in &mut cfg.blocks[t].transformers {
        *spec = TransformerSpec {
            family: TransformFamily::Fixed,
            ..spec.clone()
        };
    }
    cfg
}

/// All-on plus one run per block with that block's transformers removed.
pub fn ablation_layers(dataset: &Dataset, base: &ExperimentConfig, seeds: &[u64]) -> Result<AblationTable> {
    let mut variants = vec![("all-on".to_string(), base.network.clone())];
    for t in 0..base.network.blocks.len() {
        variants.push((format!("minus-layer-{}", t + 1), without_layer(&base.network, t)));
    }
    let mut table = AblationTable::default();
    for (variant, net) in variants {
        for &seed in seeds {
            let mut exp = base.clone();
            exp.network = net.clone();
            exp.network.seed = seed;
            exp.train.seed = seed;
            table.rows.push(run_row(dataset, &exp, "layers".into(), variant.clone())?);
        }
    }
    Ok(table)
}
