//! Training loop and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stn_core::network::Network;
use stn_core::tensor::{Tape, Tensor};
use stn_core::{Head, NetworkConfig, ParamKind, Scalar};
use stn_data::dataset::Sample;
use stn_data::metrics::{mean_iou, restricted_argmax, shape_iou};
use stn_data::{Dataset, ShapeKind, Split};

use crate::adam::Adam;
use crate::config::TrainConfig;
use crate::error::{Result, TrainError};

/// One shape ready for the network: coordinates in the working precision
/// plus training targets.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub coords: Tensor<T>,
    /// Global part labels for segmentation, `[category]` for classification.
    pub targets: Vec<usize>,
    /// Part labels local to the shape's category.
    pub local_labels: Vec<usize>,
    pub kind: ShapeKind,
}

impl<T: Scalar> Example<T> {
    pub fn from_sample(sample: &Sample, head: Head) -> Result<Self> {
        let c = sample.cloud.coords();
        let coords = Tensor::new(c.shape().to_vec(), c.data().iter().map(|&v| T::lit(v)).collect())?;
        let kind = sample.kind();
        let targets = match head {
            Head::Segmentation(classes) => {
                if kind.label_offset() + kind.parts() > classes {
                    return Err(TrainError::Mismatch(format!(
                        "segmentation head has {classes} classes but {} needs labels up to {}",
                        kind.name(),
                        kind.label_offset() + kind.parts() - 1
                    )));
                }
                sample.global_labels()
            }
            Head::Classification(classes) => {
                if kind.index() >= classes {
                    return Err(TrainError::Mismatch(format!(
                        "classification head has {classes} classes but category {} is {}",
                        kind.name(),
                        kind.index()
                    )));
                }
                vec![kind.index()]
            }
        };
        Ok(Self {
            coords,
            targets,
            local_labels: sample.labels().to_vec(),
            kind,
        })
    }
}

pub fn examples<T: Scalar>(samples: &[&Sample], head: Head) -> Result<Vec<Example<T>>> {
    samples.iter().map(|s| Example::from_sample(s, head)).collect()
}

/// Per-shape score: IoU for segmentation (argmax over the shape's own
/// parts), 0/1 correctness for classification.
fn shape_metric<T: Scalar>(head: Head, logits: &[T], ex: &Example<T>) -> Result<f64> {
    match head {
        Head::Segmentation(_) => {
            let n = ex.local_labels.len();
            let pred = restricted_argmax(logits, n, ex.kind.label_offset(), ex.kind.parts());
            Ok(shape_iou(&pred, &ex.local_labels, ex.kind.parts())?)
        }
        Head::Classification(_) => {
            let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            Ok(f64::from(u8::from(best == ex.targets[0])))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Mean loss over the batch, before the update.
    pub loss: f64,
    /// Per-shape metric on the pre-update forward pass.
    pub metrics: Vec<f64>,
    /// Frobenius norm of each transform matrix's batch gradient.
    pub transform_grad_norms: Vec<(String, f64)>,
}

/// Accumulates the batch-mean loss gradient shape by shape, then takes one
/// Adam step.
pub fn train_step<T: Scalar>(net: &mut Network<T>, opt: &mut Adam<T>, batch: &[&Example<T>]) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(TrainError::EmptySplit("batch"));
    }
    let head = net.config().head;
    let inv = T::lit(1.0 / batch.len() as f64);
    let mut loss_sum = 0.0;
    let mut metrics = Vec::with_capacity(batch.len());
    net.params_mut().zero_grads();
    for ex in batch {
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape);
        let (loss, fwd) = net.loss(&mut tape, &vars, &ex.coords, &ex.targets)?;
        loss_sum += tape.scalar(loss).as_f64();
        metrics.push(shape_metric(head, tape.value(fwd.logits), ex)?);
        let scaled = tape.scale(loss, inv);
        tape.backward(scaled)?;
        net.params_mut().accumulate_grads(&tape, &vars)?;
    }
    let loss = loss_sum / batch.len() as f64;
    if !loss.is_finite() {
        return Err(TrainError::Diverged { epoch: 0, last_good: None });
    }
    let transform_grad_norms = net
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Transform)
        .map(|p| {
            let norm = p.tensor.grad().map_or(0.0, |g| g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt());
            (p.name.clone(), norm)
        })
        .collect();
    opt.step(net.params_mut())?;
    Ok(StepOutput {
        loss,
        metrics,
        transform_grad_norms,
    })
}

/// Mean loss and metric over a split, with per-category means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Mean IoU over shapes (segmentation) or accuracy (classification).
    pub metric: f64,
    pub per_category: BTreeMap<String, f64>,
    pub count: usize,
}

/// Forward-only evaluation; the network is not modified.
pub fn evaluate<T: Scalar>(net: &Network<T>, examples: &[Example<T>]) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let head = net.config().head;
    let mut loss_sum = 0.0;
    let mut scores = Vec::with_capacity(examples.len());
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ex in examples {
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape);
        let (loss, fwd) = net.loss(&mut tape, &vars, &ex.coords, &ex.targets)?;
        loss_sum += tape.scalar(loss).as_f64();
        let s = shape_metric(head, tape.value(fwd.logits), ex)?;
        scores.push(s);
        by_cat.entry(ex.kind.name().to_string()).or_default().push(s);
    }
    Ok(Metrics {
        loss: loss_sum / examples.len() as f64,
        metric: mean_iou(&scores),
        per_category: by_cat.into_iter().map(|(k, v)| (k, mean_iou(&v))).collect(),
        count: examples.len(),
    })
}

/// Evaluates one split of a dataset.
pub fn evaluate_split<T: Scalar>(net: &Network<T>, dataset: &Dataset, split: Split) -> Result<Metrics> {
    let exs = examples::<T>(&dataset.split(split), net.config().head)?;
    evaluate(net, &exs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSummary {
    pub name: String,
    /// Gradient norm on the first optimizer step.
    pub first_grad_norm: f64,
    /// Frobenius norm of (final - initial) matrix.
    pub delta_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Mean loss of the first batch at initialization.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best validation metric, or the last
    /// epoch when there is no validation split).
    pub best_epoch: usize,
    pub test: Option<Metrics>,
    pub transforms: Vec<TransformSummary>,
    pub wall_seconds: f64,
}

impl RunReport {
    /// Copy with every wall-time field zeroed, for reproducibility checks.
    pub fn strip_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_seconds = 0.0;
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }
}

pub struct TrainOutcome<T> {
    /// Parameters from the best epoch.
    pub network: Network<T>,
    pub report: RunReport,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Trains from `net_cfg.seed`'s initialization on the train split,
/// validating after each epoch and keeping the best-validation parameters.
pub fn train<T: Scalar>(dataset: &Dataset, net_cfg: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let net = Network::<T>::new(net_cfg)?;
    train_from(net, dataset, cfg)
}

/// Like [`train`] but starting from given parameters.
pub fn train_from<T: Scalar>(mut net: Network<T>, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let start = Instant::now();
    if cfg.freeze_transforms {
        net = net.freeze_transforms();
    }
    let head = net.config().head;
    let train_set = examples::<T>(&dataset.split(Split::Train), head)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let val_set = examples::<T>(&dataset.split(Split::Val), head)?;
    let test_set = examples::<T>(&dataset.split(Split::Test), head)?;
    let initial: Vec<Tensor<T>> = net
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Transform)
        .map(|p| p.tensor.clone())
        .collect();

    let mut opt = Adam::new(net.params(), cfg.adam);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network<T>)> = None;
    let mut initial_loss = None;
    let mut first_norms = Vec::new();
    let mut last_good = None;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let (mut loss_sum, mut metric_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let out = match train_step(&mut net, &mut opt, &batch) {
                Err(TrainError::Diverged { .. }) => return Err(TrainError::Diverged { epoch, last_good }),
                other => other?,
            };
            if initial_loss.is_none() {
                initial_loss = Some(out.loss);
                first_norms = out.transform_grad_norms;
            }
            loss_sum += out.loss * batch.len() as f64;
            metric_sum += out.metrics.iter().sum::<f64>();
        }
        let n = train_set.len() as f64;
        let (val_loss, val_metric) = if val_set.is_empty() {
            (None, None)
        } else {
            let m = evaluate(&net, &val_set)?;
            (Some(m.loss), Some(m.metric))
        };
        if val_loss.is_some_and(|l| !l.is_finite()) {
            return Err(TrainError::Diverged { epoch, last_good });
        }
        let score = val_metric.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || val_metric.is_none()) {
            best = Some((score, epoch, net.clone()));
        }
        last_good = Some(epoch);
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_metric: metric_sum / n,
            val_loss,
            val_metric,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let (_, best_epoch, network) = best.expect("at least one epoch");
    let test = if test_set.is_empty() {
        None
    } else {
        Some(evaluate(&network, &test_set)?)
    };
    let transforms = network
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Transform)
        .zip(&initial)
        .zip(first_norms)
        .map(|((p, init), (name, first_grad_norm))| TransformSummary {
            name,
            first_grad_norm,
            delta_norm: p
                .tensor
                .data()
                .iter()
                .zip(init.data())
                .map(|(a, b)| (*a - *b).as_f64().powi(2))
                .sum::<f64>()
                .sqrt(),
        })
        .collect();
    let report = RunReport {
        seed: cfg.seed,
        network: network.config().clone(),
        train: cfg.clone(),
        initial_loss: initial_loss.expect("at least one step"),
        epochs: records,
        best_epoch,
        test,
        transforms,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { network, report })
}
