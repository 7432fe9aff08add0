//! Spatial-transformer blocks assembled into segmentation and
//! classification networks.
//!
//! Each block holds several transformers. Transformer `i` maps the input
//! cloud to new coordinates `G_i`, builds the k-NN graph of `G_i`, runs an
//! edge convolution over the previous features with `G_i` appended, and the
//! block output concatenates all sub-features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_affine, apply_deformable, apply_projective};
use crate::neighborhood::{knn_graph, AffinityGraph};
use crate::pointconv::{edge_conv, pointwise_mlp, Dense, EdgeConvWeights, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the feature block of deformable matrices at init.
pub const DEFORMABLE_FEATURE_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformFamily {
    Affine,
    Projective,
    Deformable,
    /// k-NN on the raw input coordinates; no learned matrix.
    Fixed,
}

impl TransformFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Affine => "affine",
            Self::Projective => "projective",
            Self::Deformable => "deformable",
            Self::Fixed => "fixed",
        }
    }
}

impl std::str::FromStr for TransformFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(Self::Affine),
            "projective" => Ok(Self::Projective),
            "deformable" => Ok(Self::Deformable),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::Config(format!("unknown transform family '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub family: TransformFamily,
    /// Output width of this transformer's edge convolution.
    pub sub_feature_width: usize,
    /// Hidden widths of the edge MLP (empty = single linear layer).
    pub edge_hidden: Vec<usize>,
}

impl TransformerSpec {
    /// One hidden layer as wide as the output.
    pub fn new(family: TransformFamily, sub_feature_width: usize) -> Self {
        Self {
            family,
            sub_feature_width,
            edge_hidden: vec![sub_feature_width],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub transformers: Vec<TransformerSpec>,
    pub k_nn: usize,
}

impl BlockConfig {
    /// `count` identical transformers of one family.
    pub fn uniform(family: TransformFamily, count: usize, sub_feature_width: usize, k_nn: usize) -> Self {
        Self {
            transformers: vec![TransformerSpec::new(family, sub_feature_width); count],
            k_nn,
        }
    }

    /// Sum of the sub-feature widths.
    pub fn output_width(&self) -> usize {
        self.transformers.iter().map(|t| t.sub_feature_width).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "classes", rename_all = "lowercase")]
pub enum Head {
    Segmentation(usize),
    Classification(usize),
}

impl Head {
    pub fn classes(self) -> usize {
        match self {
            Self::Segmentation(c) | Self::Classification(c) => c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub blocks: Vec<BlockConfig>,
    pub head: Head,
    /// Hidden widths of the head MLP; the final layer has `head.classes()` outputs.
    pub head_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl NetworkConfig {
    /// Three blocks of `graphs` transformers with sub-feature width `f`.
    pub fn uniform(family: TransformFamily, graphs: usize, f: usize, k_nn: usize, head: Head) -> Self {
        Self {
            blocks: vec![BlockConfig::uniform(family, graphs, f, k_nn); 3],
            head,
            head_hidden: vec![256, 256],
            leaky_slope: LEAKY_SLOPE,
            seed: 0,
        }
    }

    /// Width of the features entering block `t` (raw coordinates for block 0).
    pub fn input_width(&self, t: usize) -> usize {
        if t == 0 {
            3
        } else {
            self.blocks[t - 1].output_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.head.classes() < 2 {
            return Err(Error::Config("the head needs at least 2 classes".into()));
        }
        if !(self.leaky_slope.is_finite()) {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        for (t, b) in self.blocks.iter().enumerate() {
            if b.transformers.is_empty() {
                return Err(Error::Config(format!("block {t} has no transformers")));
            }
            if b.k_nn == 0 {
                return Err(Error::Config(format!("block {t} has k_nn = 0")));
            }
            for tf in &b.transformers {
                if tf.sub_feature_width == 0 || tf.edge_hidden.contains(&0) {
                    return Err(Error::Config(format!("block {t} has a zero width")));
                }
            }
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Transform,
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Named, ordered parameter tensors of a network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: String, kind: ParamKind, tensor: Tensor<T>) -> usize {
        self.params.push(Param {
            name,
            kind,
            tensor: tensor.with_requires_grad(true),
            frozen: false,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Excludes every transform matrix from gradient updates.
    pub fn freeze_transforms(mut self) -> Self {
        for p in &mut self.params {
            if p.kind == ParamKind::Transform {
                p.frozen = true;
                p.tensor.set_requires_grad(false);
            }
        }
        self
    }

    /// Registers every parameter as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    /// Adds the tape gradients of `vars` into the parameters' grad slots.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DenseIds {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct TransformerLayout {
    family: TransformFamily,
    matrix: Option<usize>,
    edge: Vec<DenseIds>,
}

/// Coordinates and graph produced by one transformer during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphTrace<T> {
    pub family: TransformFamily,
    /// `3 × N` transformed coordinates.
    pub coords: Vec<T>,
    pub graph: AffinityGraph,
}

#[derive(Debug)]
pub struct Forward<T> {
    /// `C × N` for segmentation, `C × 1` for classification.
    pub logits: Var,
    /// One `𝔣 × N` output per block.
    pub block_outputs: Vec<Var>,
    /// `trace[t][i]` belongs to transformer `i` of block `t`.
    pub trace: Vec<Vec<SubgraphTrace<T>>>,
}

impl<T> Forward<T> {
    /// Hash of every graph built during the pass.
    pub fn graph_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for block in &self.trace {
            for sub in block {
                sub.graph.hash(&mut h);
            }
        }
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamSet<T>,
    blocks: Vec<Vec<TransformerLayout>>,
    head: Vec<DenseIds>,
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

fn transform_matrix<T: Scalar>(rng: &mut ChaCha8Rng, family: TransformFamily, f_in: usize) -> Option<Tensor<T>> {
    match family {
        TransformFamily::Fixed => None,
        TransformFamily::Affine => Some(normal_tensor(rng, vec![3, 3], 1.0)),
        TransformFamily::Projective => {
            // standard-normal linear block, near-unit divisor row
            let small = Normal::new(0.0, DEFORMABLE_FEATURE_INIT_STD).expect("valid std");
            let mut data = vec![0.0f64; 16];
            for r in 0..3 {
                for c in 0..3 {
                    data[r * 4 + c] = StandardNormal.sample(rng);
                }
                data[r * 4 + 3] = small.sample(rng);
            }
            for c in 0..3 {
                data[12 + c] = small.sample(rng);
            }
            data[15] = 1.0;
            Some(Tensor::new(vec![4, 4], data.into_iter().map(T::lit).collect()).unwrap())
        }
        TransformFamily::Deformable => {
            let small = Normal::new(0.0, DEFORMABLE_FEATURE_INIT_STD).expect("valid std");
            let cols = 3 + f_in;
            let mut data = vec![T::zero(); 3 * cols];
            for r in 0..3 {
                for c in 0..cols {
                    let v: f64 = if c < 3 {
                        StandardNormal.sample(rng)
                    } else {
                        small.sample(rng)
                    };
                    data[r * cols + c] = T::lit(v);
                }
            }
            Some(Tensor::new(vec![3, cols], data).unwrap())
        }
    }
}

fn dense_layer<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    out: usize,
    input: usize,
    gain: f64,
) -> DenseIds {
    let std = gain * (2.0 / input as f64).sqrt();
    let weight = params.push(format!("{name}.weight"), ParamKind::Weight, normal_tensor(rng, vec![out, input], std));
    let bias = params.push(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(vec![out]));
    DenseIds { weight, bias }
}

/// Draws a fresh parameter set: transform matrices from N(0, 1) (the
/// deformable feature block from N(0, 0.01²)), He-scaled dense weights with
/// a 0.1 gain on the final head layer, zero biases.
pub fn init_params<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut blocks = Vec::with_capacity(config.blocks.len());
    for (t, block) in config.blocks.iter().enumerate() {
        let f_in = config.input_width(t);
        let mut layouts = Vec::with_capacity(block.transformers.len());
        for (i, spec) in block.transformers.iter().enumerate() {
            let prefix = format!("block{t}.tf{i}");
            let matrix = transform_matrix(&mut rng, spec.family, f_in)
                .map(|m| params.push(format!("{prefix}.{}", spec.family.name()), ParamKind::Transform, m));
            let mut edge = Vec::new();
            let mut width = 2 * (f_in + 3);
            let widths = spec.edge_hidden.iter().chain(std::iter::once(&spec.sub_feature_width));
            for (l, &out) in widths.enumerate() {
                edge.push(dense_layer(&mut params, &mut rng, &format!("{prefix}.edge{l}"), out, width, 1.0));
                width = out;
            }
            layouts.push(TransformerLayout {
                family: spec.family,
                matrix,
                edge,
            });
        }
        blocks.push(layouts);
    }
    let mut width: usize = config.blocks.iter().map(BlockConfig::output_width).sum();
    let mut head = Vec::new();
    let outs: Vec<usize> = config.head_hidden.iter().copied().chain([config.head.classes()]).collect();
    for (l, &out) in outs.iter().enumerate() {
        let gain = if l + 1 == outs.len() { 0.1 } else { 1.0 };
        head.push(dense_layer(&mut params, &mut rng, &format!("head{l}"), out, width, gain));
        width = out;
    }
    Ok(Network {
        config: config.clone(),
        params,
        blocks,
        head,
    })
}

impl<T: Scalar> Network<T> {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        init_params(config, config.seed)
    }

    /// Rebuilds a network from a config and a matching parameter set
    /// (names, order and shapes must agree).
    pub fn from_parts(config: NetworkConfig, params: ParamSet<T>) -> Result<Self> {
        let template = init_params::<T>(&config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Config(format!(
                "config expects {} parameters, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(params.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() || want.kind != got.kind {
                return Err(Error::Config(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            ..template
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn freeze_transforms(mut self) -> Self {
        self.params = self.params.freeze_transforms();
        self
    }

    /// Indices of every transform matrix in the parameter set.
    pub fn transform_param_indices(&self) -> Vec<usize> {
        self.blocks.iter().flatten().filter_map(|l| l.matrix).collect()
    }

    fn dense(&self, ids: &DenseIds, vars: &[Var]) -> Dense {
        Dense {
            weight: vars[ids.weight],
            bias: vars[ids.bias],
        }
    }

    fn head_layers(&self, vars: &[Var]) -> Vec<Dense> {
        self.head.iter().map(|d| self.dense(d, vars)).collect()
    }

    /// One transformer block: transform, build graph, edge-convolve, concat.
    pub fn block_forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        t: usize,
        points: Var,
        features: Var,
    ) -> Result<(Var, Vec<SubgraphTrace<T>>)> {
        let block = &self.config.blocks[t];
        let expected = self.config.input_width(t);
        let got = tape.shape(features)[0];
        if got != expected {
            return Err(Error::WidthMismatch {
                context: format!("block {t} input features"),
                expected,
                actual: got,
            });
        }
        let slope = T::lit(self.config.leaky_slope);
        let mut outs = Vec::with_capacity(block.transformers.len());
        let mut trace = Vec::with_capacity(block.transformers.len());
        for layout in &self.blocks[t] {
            let coords = match (layout.family, layout.matrix) {
                (TransformFamily::Fixed, _) => points,
                (TransformFamily::Affine, Some(m)) => apply_affine(tape, vars[m], points)?,
                (TransformFamily::Projective, Some(m)) => apply_projective(tape, vars[m], points)?,
                (TransformFamily::Deformable, Some(m)) => apply_deformable(tape, vars[m], points, features)?,
                (family, None) => unreachable!("{family:?} transformer without matrix"),
            };
            let graph = knn_graph(tape.value(coords), block.k_nn)?;
            let weights = EdgeConvWeights {
                layers: layout.edge.iter().map(|d| self.dense(d, vars)).collect(),
                slope,
            };
            outs.push(edge_conv(tape, features, coords, &graph, &weights)?);
            trace.push(SubgraphTrace {
                family: layout.family,
                coords: tape.value(coords).to_vec(),
                graph,
            });
        }
        Ok((tape.concat(&outs, 0)?, trace))
    }

    fn run_blocks(&self, tape: &mut Tape<T>, vars: &[Var], coords: &Tensor<T>) -> Result<(Var, Vec<Var>, Vec<Vec<SubgraphTrace<T>>>)> {
        if coords.shape().len() != 2 || coords.shape()[0] != 3 {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: coords.shape().to_vec(),
                right: vec![3, 0],
            });
        }
        let points = tape.constant(coords);
        let mut features = points;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut trace = Vec::with_capacity(self.blocks.len());
        for t in 0..self.blocks.len() {
            let (out, tr) = self.block_forward(tape, vars, t, points, features)?;
            outputs.push(out);
            trace.push(tr);
            features = out;
        }
        let skip = tape.concat(&outputs, 0)?;
        Ok((skip, outputs, trace))
    }

    /// Per-point logits `C × N`.
    pub fn seg_forward(&self, tape: &mut Tape<T>, vars: &[Var], coords: &Tensor<T>) -> Result<Forward<T>> {
        let (skip, block_outputs, trace) = self.run_blocks(tape, vars, coords)?;
        let slope = T::lit(self.config.leaky_slope);
        let logits = pointwise_mlp(tape, skip, &self.head_layers(vars), slope)?;
        Ok(Forward {
            logits,
            block_outputs,
            trace,
        })
    }

    /// Shape logits `C × 1` after a global max-pool over points.
    pub fn cls_forward(&self, tape: &mut Tape<T>, vars: &[Var], coords: &Tensor<T>) -> Result<Forward<T>> {
        let (skip, block_outputs, trace) = self.run_blocks(tape, vars, coords)?;
        let logits = self.cls_head(tape, vars, skip)?;
        Ok(Forward {
            logits,
            block_outputs,
            trace,
        })
    }

    /// Max-pools skip features (`𝔣_total × N`) over points and maps them to `C × 1` logits.
    pub fn cls_head(&self, tape: &mut Tape<T>, vars: &[Var], skip: Var) -> Result<Var> {
        let width = tape.shape(skip)[0];
        let pooled = tape.max_over_axis(skip, 1)?;
        let pooled = tape.reshape(pooled, vec![width, 1])?;
        let slope = T::lit(self.config.leaky_slope);
        pointwise_mlp(tape, pooled, &self.head_layers(vars), slope)
    }

    /// Dispatches on the configured head.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], coords: &Tensor<T>) -> Result<Forward<T>> {
        match self.config.head {
            Head::Segmentation(_) => self.seg_forward(tape, vars, coords),
            Head::Classification(_) => self.cls_forward(tape, vars, coords),
        }
    }

    /// Forward pass plus mean cross-entropy against `labels` (one per point
    /// for segmentation, a single class for classification).
    pub fn loss(&self, tape: &mut Tape<T>, vars: &[Var], coords: &Tensor<T>, labels: &[usize]) -> Result<(Var, Forward<T>)> {
        let fwd = self.forward(tape, vars, coords)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        Ok((loss, fwd))
    }
}
