//! Independent reference implementations shared by the integration and
//! acceptance tests. Nothing here calls into the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stn_core::neighborhood::AffinityGraph;
use stn_core::tensor::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform_vec(rng, n, -1.0, 1.0)).unwrap()
}

/// `3 × N` row-major coordinates in the cube [-1, 1]^3.
pub fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    uniform_vec(rng, 3 * n, -1.0, 1.0)
}

/// Dense layer as plain row-major `out × in` weights and a bias.
#[derive(Clone, Debug)]
pub struct PlainDense {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub out: usize,
    pub input: usize,
}

impl PlainDense {
    pub fn random(rng: &mut ChaCha8Rng, out: usize, input: usize) -> Self {
        Self {
            weight: uniform_vec(rng, out * input, -0.5, 0.5),
            bias: uniform_vec(rng, out, -0.1, 0.1),
            out,
            input,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|r| {
                let row = &self.weight[r * self.input..(r + 1) * self.input];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[r]
            })
            .collect()
    }
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

/// Per-point, per-neighbor edge convolution: builds every edge feature
/// `[x_i ; x_j - x_i]`, runs the MLP on it and takes the elementwise max.
pub fn naive_edge_conv(
    features: &[f64],
    f_in: usize,
    coords: &[f64],
    graph: &AffinityGraph,
    layers: &[PlainDense],
    slope: f64,
) -> Vec<f64> {
    let n = graph.n();
    let point = |i: usize| -> Vec<f64> {
        let mut x: Vec<f64> = (0..f_in).map(|r| features[r * n + i]).collect();
        x.extend((0..3).map(|r| coords[r * n + i]));
        x
    };
    let f_out = layers.last().unwrap().out;
    let mut out = vec![0.0; f_out * n];
    for i in 0..n {
        let xi = point(i);
        let mut best = vec![f64::NEG_INFINITY; f_out];
        for &j in graph.row(i) {
            let xj = point(j);
            let mut e = xi.clone();
            e.extend(xj.iter().zip(&xi).map(|(a, b)| a - b));
            let mut h = layers[0].apply(&e);
            for layer in &layers[1..] {
                let act: Vec<f64> = h.iter().map(|&v| leaky(v, slope)).collect();
                h = layer.apply(&act);
            }
            for (b, v) in best.iter_mut().zip(h) {
                *b = b.max(v);
            }
        }
        for r in 0..f_out {
            out[r * n + i] = best[r];
        }
    }
    out
}

/// `out[r][i][j] = src[r][idx[i][j]]` by triple loop.
pub fn naive_gather(src: &[f64], rows: usize, n: usize, idx: &[usize], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * n * k);
    for r in 0..rows {
        for i in 0..n {
            for j in 0..k {
                out.push(src[r * n + idx[i * k + j]]);
            }
        }
    }
    out
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central-difference audit of every input entry. The (possibly non-scalar)
/// output is contracted with fixed random weights to get a scalar loss.
/// Returns the worst relative error.
pub fn fd_max_rel_err<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tape<f64>, Vec<Var>, Tensor<f64>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = build(&mut tape, &vars);
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut r = rng(0xfd);
                random_tensor(&mut r, tape.shape(out))
            }
        };
        let wv = tape.constant(&w);
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        (tape.scalar(loss), tape, vars, w, loss)
    };
    let (_, mut tape, vars, w, loss) = eval(inputs, None);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (t, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[t]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[e] -= step;
            let numeric = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * step);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

pub fn plain_stack(params: &stn_core::ParamSet, prefix: &str) -> Vec<PlainDense> {
    let mut layers = Vec::new();
    while let Some(w) = params.by_name(&format!("{prefix}{}.weight", layers.len())) {
        let b = params.by_name(&format!("{prefix}{}.bias", layers.len())).unwrap();
        let s = w.tensor.shape();
        layers.push(PlainDense {
            weight: w.tensor.data().to_vec(),
            bias: b.tensor.data().to_vec(),
            out: s[0],
            input: s[1],
        });
    }
    layers
}

/// Segmentation logits of an all-`fixed` network by plain loops: brute-force
/// graphs on the raw coordinates, naive edge convolutions, skip concat and a
/// per-column head.
pub fn naive_fixed_seg_logits(net: &stn_core::Network, coords: &[f64]) -> Vec<f64> {
    let cfg = net.config();
    let n = coords.len() / 3;
    let slope = cfg.leaky_slope;
    let mut features = coords.to_vec();
    let mut f_in = 3;
    let mut skip: Vec<f64> = Vec::new();
    for (t, block) in cfg.blocks.iter().enumerate() {
        let graph = stn_core::neighborhood::knn_oracle(coords, block.k_nn).unwrap();
        let mut out = Vec::new();
        for i in 0..block.transformers.len() {
            let layers = plain_stack(net.params(), &format!("block{t}.tf{i}.edge"));
            out.extend(naive_edge_conv(&features, f_in, coords, &graph, &layers, slope));
        }
        f_in = out.len() / n;
        skip.extend(&out);
        features = out;
    }
    let head = plain_stack(net.params(), "head");
    let width = skip.len() / n;
    let classes = head.last().unwrap().out;
    let mut logits = vec![0.0; classes * n];
    for i in 0..n {
        let mut h: Vec<f64> = (0..width).map(|r| skip[r * n + i]).collect();
        for (l, layer) in head.iter().enumerate() {
            if l > 0 {
                h = h.iter().map(|&v| leaky(v, slope)).collect();
            }
            h = layer.apply(&h);
        }
        for c in 0..classes {
            logits[c * n + i] = h[c];
        }
    }
    logits
}
