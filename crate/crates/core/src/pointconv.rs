//! Edge convolution over an affinity graph and shared per-point MLPs.

use crate::error::{Error, Result};
use crate::neighborhood::AffinityGraph;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Default negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Weight and bias of one dense layer, as tape nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    /// `out × in`
    pub weight: Var,
    /// length `out`
    pub bias: Var,
}

/// Edge MLP of an edge convolution. The first layer maps the edge feature
/// `[x_i ; x_j - x_i]` (width `2·(f_in + 3)`) to its output width.
#[derive(Clone, Debug)]
pub struct EdgeConvWeights<T> {
    pub layers: Vec<Dense>,
    pub slope: T,
}

fn dense_shape<T: Scalar>(tape: &Tape<T>, layer: &Dense) -> Result<(usize, usize)> {
    let s = tape.shape(layer.weight);
    if s.len() != 2 || tape.value(layer.bias).len() != s[0] {
        return Err(Error::ShapeMismatch {
            op: "dense",
            left: s.to_vec(),
            right: tape.shape(layer.bias).to_vec(),
        });
    }
    Ok((s[0], s[1]))
}

/// `F_out[:, i] = max_j MLP([x_i ; x_j - x_i])` over the neighbors `j` of
/// `i`, with `x = [F_prev ; G]`.
///
/// The first layer is linear, so it is evaluated per point and then
/// gathered: `W [x_i ; x_j - x_i] = (W_a - W_b) x_i + W_b x_j`.
pub fn edge_conv<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    coords: Var,
    graph: &AffinityGraph,
    weights: &EdgeConvWeights<T>,
) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let gs = tape.shape(coords).to_vec();
    if fs.len() != 2 || gs.len() != 2 || gs[0] != 3 || fs[1] != gs[1] {
        return Err(Error::ShapeMismatch {
            op: "edge_conv",
            left: fs,
            right: gs,
        });
    }
    let n = gs[1];
    if graph.n() != n {
        return Err(Error::WidthMismatch {
            context: "edge_conv graph point count".into(),
            expected: n,
            actual: graph.n(),
        });
    }
    let width = fs[0] + 3;
    let first = weights.layers.first().ok_or(Error::Empty("edge_conv layers"))?;
    let (hidden, in_w) = dense_shape(tape, first)?;
    if in_w != 2 * width {
        return Err(Error::WidthMismatch {
            context: "edge_conv input".into(),
            expected: 2 * width,
            actual: in_w,
        });
    }
    let k = graph.k();
    let x = tape.concat(&[features, coords], 0)?;
    let w_center = tape.slice(first.weight, 1, 0, width)?;
    let w_offset = tape.slice(first.weight, 1, width, width)?;
    let w_self = tape.sub(w_center, w_offset)?;
    let center = tape.matmul(w_self, x)?;
    let center = tape.add_bias(center, first.bias)?;
    let neighbor = tape.matmul(w_offset, x)?;
    let gathered = tape.gather_cols(neighbor, graph.indices(), k)?;
    let mut edges = tape.add_broadcast_last(gathered, center)?;
    let mut rows = hidden;
    for layer in &weights.layers[1..] {
        let (out, in_w) = dense_shape(tape, layer)?;
        if in_w != rows {
            return Err(Error::WidthMismatch {
                context: "edge_conv hidden layer".into(),
                expected: rows,
                actual: in_w,
            });
        }
        let act = tape.leaky_relu(edges, weights.slope);
        let y = tape.matmul(layer.weight, act)?;
        edges = tape.add_bias(y, layer.bias)?;
        rows = out;
    }
    tape.max_over_axis(edges, 2)
}

/// Applies the same dense stack to every column of `features` (`f × N`),
/// with a leaky ReLU between layers and none after the last.
pub fn pointwise_mlp<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    layers: &[Dense],
    slope: T,
) -> Result<Var> {
    let mut h = features;
    for (l, layer) in layers.iter().enumerate() {
        let (_, in_w) = dense_shape(tape, layer)?;
        let rows = tape.shape(h)[0];
        if in_w != rows {
            return Err(Error::WidthMismatch {
                context: format!("pointwise_mlp layer {l}"),
                expected: rows,
                actual: in_w,
            });
        }
        if l > 0 {
            h = tape.leaky_relu(h, slope);
        }
        let y = tape.matmul(layer.weight, h)?;
        h = tape.add_bias(y, layer.bias)?;
    }
    Ok(h)
}
