//! Finite-difference audit of network gradients.
//!
//! k-NN selection and max-aggregation make the loss piecewise smooth. A
//! probe whose perturbed passes change any graph or argmax routing straddles
//! a kink, so it is skipped and another parameter entry is drawn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{normalize_cloud, PointCloud};
use crate::network::{init_params, BlockConfig, Head, Network, NetworkConfig, ParamKind, TransformFamily, TransformerSpec};
use crate::pointconv::LEAKY_SLOPE;
use crate::tensor::{Tape, Tensor};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub num_params: usize,
    pub step: f64,
    pub n_points: usize,
    /// Entries drawn from every transform matrix before sampling the rest.
    pub per_transform: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_params: 50,
            step: 1e-5,
            n_points: 32,
            per_transform: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntryCheck {
    pub param: String,
    pub kind: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<EntryCheck>,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Two blocks, each with one affine, one projective and one deformable transformer.
pub fn audit_network_config(seed: u64) -> NetworkConfig {
    let block = BlockConfig {
        transformers: [TransformFamily::Affine, TransformFamily::Projective, TransformFamily::Deformable]
            .into_iter()
            .map(|f| TransformerSpec::new(f, 4))
            .collect(),
        k_nn: 4,
    };
    NetworkConfig {
        blocks: vec![block.clone(), block],
        head: Head::Segmentation(3),
        head_hidden: vec![8],
        leaky_slope: LEAKY_SLOPE,
        seed,
    }
}

struct Probe {
    loss: f64,
    graphs: u64,
    routing: u64,
}

fn probe(net: &Network<f64>, coords: &Tensor<f64>, labels: &[usize]) -> Result<Probe> {
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let (loss, fwd) = net.loss(&mut tape, &vars, coords, labels)?;
    Ok(Probe {
        loss: tape.scalar(loss),
        graphs: fwd.graph_fingerprint(),
        routing: tape.kink_fingerprint(),
    })
}

/// Central-difference check of `net`'s loss gradient on one labelled cloud.
pub fn check_network(
    net: &Network<f64>,
    cloud: &PointCloud<f64>,
    labels: &[usize],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let coords = cloud.coords();
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let (loss, fwd) = net.loss(&mut tape, &vars, &coords, labels)?;
    let base_graphs = fwd.graph_fingerprint();
    let base_routing = tape.kink_fingerprint();
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(net.params().iter())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut queue: Vec<(usize, usize)> = Vec::new();
    for i in net.transform_param_indices() {
        let n = net.params().get(i).tensor.numel();
        let mut elems: Vec<usize> = (0..n).collect();
        elems.shuffle(&mut rng);
        queue.extend(elems.into_iter().take(cfg.per_transform.max(1) * 4).map(|e| (i, e)));
    }
    let trainable: Vec<usize> = (0..net.params().len()).filter(|&i| !net.params().get(i).frozen).collect();
    let mut random_entries = std::iter::from_fn(|| {
        let i = trainable[rng.random_range(0..trainable.len())];
        let e = rng.random_range(0..net.params().get(i).tensor.numel());
        Some((i, e))
    });

    let mut per_param_done = vec![0usize; net.params().len()];
    let mut checks = Vec::new();
    let mut skipped = 0;
    let mut queue = queue.into_iter();
    let max_attempts = 20 * cfg.num_params + 200;
    for _ in 0..max_attempts {
        let forced_done = net
            .transform_param_indices()
            .iter()
            .all(|&i| per_param_done[i] >= cfg.per_transform);
        if checks.len() >= cfg.num_params && forced_done {
            break;
        }
        let (pi, e) = match queue.next() {
            Some(entry) if per_param_done[entry.0] < cfg.per_transform => entry,
            Some(_) => continue,
            None => random_entries.next().unwrap(),
        };
        let mut plus = net.clone();
        plus.params_mut().get_mut(pi).tensor.data_mut()[e] += cfg.step;
        let mut minus = net.clone();
        minus.params_mut().get_mut(pi).tensor.data_mut()[e] -= cfg.step;
        let (p, m) = (probe(&plus, &coords, labels)?, probe(&minus, &coords, labels)?);
        let smooth = [&p, &m]
            .iter()
            .all(|pr| pr.graphs == base_graphs && pr.routing == base_routing);
        if !smooth {
            skipped += 1;
            continue;
        }
        let numeric = (p.loss - m.loss) / (2.0 * cfg.step);
        let analytic = grads[pi][e];
        let param = net.params().get(pi);
        per_param_done[pi] += 1;
        checks.push(EntryCheck {
            param: param.name.clone(),
            kind: format!("{:?}", param.kind),
            element: e,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed: cfg.seed,
        checks,
        skipped_kinks: skipped,
        max_rel_err,
    })
}

/// Random normalized cloud with random labels for the audit network.
pub fn audit_fixture(seed: u64, n_points: usize, classes: usize) -> Result<(PointCloud<f64>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let points = (0..n_points)
        .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let cloud = normalize_cloud(&PointCloud::new(points)?)?;
    let labels = (0..n_points).map(|_| rng.random_range(0..classes)).collect();
    Ok((cloud, labels))
}

/// Builds the audit network and fixture from `cfg.seed` and checks it.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let net_cfg = audit_network_config(cfg.seed);
    let net: Network<f64> = init_params(&net_cfg, cfg.seed)?;
    let (cloud, labels) = audit_fixture(cfg.seed, cfg.n_points, net_cfg.head.classes())?;
    check_network(&net, &cloud, &labels, cfg)
}

/// Whether a report covers every transform family's matrix.
pub fn covers_transform_kinds(report: &GradcheckReport) -> bool {
    ["affine", "projective", "deformable"]
        .iter()
        .all(|f| report.checks.iter().any(|c| c.kind == format!("{:?}", ParamKind::Transform) && c.param.ends_with(f)))
}
