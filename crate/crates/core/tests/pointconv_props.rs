mod common;

use common::oracles::{fd_max_rel_err, naive_edge_conv, random_coords, random_tensor, rng, PlainDense};
use rand::seq::SliceRandom;
use rand::Rng;
use stn_core::neighborhood::{knn_graph, AffinityGraph};
use stn_core::pointconv::{edge_conv, pointwise_mlp, Dense, EdgeConvWeights};
use stn_core::tensor::{Tape, Tensor};

fn bind(tape: &mut Tape<f64>, layers: &[PlainDense]) -> Vec<Dense> {
    layers
        .iter()
        .map(|l| Dense {
            weight: tape.leaf(&Tensor::new(vec![l.out, l.input], l.weight.clone()).unwrap()),
            bias: tape.leaf(&Tensor::new(vec![l.out], l.bias.clone()).unwrap()),
        })
        .collect()
}

fn random_mlp(r: &mut rand_chacha::ChaCha8Rng, input: usize, widths: &[usize]) -> Vec<PlainDense> {
    let mut w = input;
    widths
        .iter()
        .map(|&out| {
            let l = PlainDense::random(r, out, w);
            w = out;
            l
        })
        .collect()
}

fn run_edge_conv(features: &[f64], f_in: usize, coords: &[f64], graph: &AffinityGraph, layers: &[PlainDense]) -> Vec<f64> {
    let n = graph.n();
    let mut tape = Tape::new();
    let f = tape.constant(&Tensor::new(vec![f_in, n], features.to_vec()).unwrap());
    let g = tape.constant(&Tensor::new(vec![3, n], coords.to_vec()).unwrap());
    let weights = EdgeConvWeights {
        layers: bind(&mut tape, layers),
        slope: 0.2,
    };
    let out = edge_conv(&mut tape, f, g, graph, &weights).unwrap();
    tape.value(out).to_vec()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn edge_conv_matches_naive_loop() {
    let mut r = rng(50);
    for trial in 0..40 {
        let n = r.random_range(4..60);
        let f_in = r.random_range(1..6);
        let k = r.random_range(1..n.min(9));
        let depth = 1 + trial % 3;
        let widths: Vec<usize> = (0..depth).map(|_| r.random_range(1..7)).collect();
        let coords = random_coords(&mut r, n);
        let feats = random_tensor(&mut r, &[f_in, n]).into_data();
        let graph = knn_graph(&coords, k).unwrap();
        let layers = random_mlp(&mut r, 2 * (f_in + 3), &widths);
        let got = run_edge_conv(&feats, f_in, &coords, &graph, &layers);
        let want = naive_edge_conv(&feats, f_in, &coords, &graph, &layers, 0.2);
        assert!(max_abs_diff(&got, &want) < 1e-12, "trial {trial}");
    }
}

#[test]
fn edge_conv_gradients_match_finite_differences() {
    let mut r = rng(51);
    let (n, f_in, k) = (9, 2, 3);
    let coords = Tensor::new(vec![3, n], random_coords(&mut r, n)).unwrap();
    let graph = knn_graph(coords.data(), k).unwrap();
    let feats = random_tensor(&mut r, &[f_in, n]);
    let w0 = random_tensor(&mut r, &[4, 2 * (f_in + 3)]);
    let b0 = random_tensor(&mut r, &[4]);
    let w1 = random_tensor(&mut r, &[3, 4]);
    let b1 = random_tensor(&mut r, &[3]);
    let err = fd_max_rel_err(&[feats, coords, w0, b0, w1, b1], 1e-5, |t, v| {
        let weights = EdgeConvWeights {
            layers: vec![Dense { weight: v[2], bias: v[3] }, Dense { weight: v[4], bias: v[5] }],
            slope: 0.2,
        };
        edge_conv(t, v[0], v[1], &graph, &weights).unwrap()
    });
    assert!(err < 1e-4, "edge_conv rel err {err}");
}

#[test]
fn edge_conv_is_permutation_equivariant() {
    let mut r = rng(52);
    let (n, f_in, k) = (40, 3, 5);
    let coords = random_coords(&mut r, n);
    let feats = random_tensor(&mut r, &[f_in, n]).into_data();
    let graph = knn_graph(&coords, k).unwrap();
    let layers = random_mlp(&mut r, 2 * (f_in + 3), &[6, 4]);
    let base = run_edge_conv(&feats, f_in, &coords, &graph, &layers);

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let mut inv = vec![0; n];
    for (m, &p) in perm.iter().enumerate() {
        inv[p] = m;
    }
    let permute = |src: &[f64], rows: usize| -> Vec<f64> {
        let mut out = vec![0.0; rows * n];
        for row in 0..rows {
            for m in 0..n {
                out[row * n + m] = src[row * n + perm[m]];
            }
        }
        out
    };
    let rows: Vec<Vec<usize>> = (0..n).map(|m| graph.row(perm[m]).iter().map(|&j| inv[j]).collect()).collect();
    let pgraph = AffinityGraph::from_rows(rows).unwrap();
    let got = run_edge_conv(&permute(&feats, f_in), f_in, &permute(&coords, 3), &pgraph, &layers);
    assert!(max_abs_diff(&got, &permute(&base, 4)) < 1e-12);
}

#[test]
fn duplicating_a_neighbor_leaves_max_unchanged() {
    let mut r = rng(53);
    let (n, f_in, k) = (30, 2, 4);
    let coords = random_coords(&mut r, n);
    let feats = random_tensor(&mut r, &[f_in, n]).into_data();
    let graph = knn_graph(&coords, k).unwrap();
    let layers = random_mlp(&mut r, 2 * (f_in + 3), &[5, 3]);
    let base = run_edge_conv(&feats, f_in, &coords, &graph, &layers);
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut row = graph.row(i).to_vec();
            row.push(row[r.random_range(0..k)]);
            row
        })
        .collect();
    let dup = AffinityGraph::from_rows(rows).unwrap();
    assert_eq!(run_edge_conv(&feats, f_in, &coords, &dup, &layers), base);
}

#[test]
fn zero_features_make_feature_weights_irrelevant() {
    let mut r = rng(54);
    let (n, f_in) = (20, 3);
    let coords = random_coords(&mut r, n);
    let feats = vec![0.0; f_in * n];
    let graph = knn_graph(&coords, 3).unwrap();
    let layers = random_mlp(&mut r, 2 * (f_in + 3), &[4]);
    let base = run_edge_conv(&feats, f_in, &coords, &graph, &layers);
    let mut scrambled = layers.clone();
    let width = f_in + 3;
    for row in 0..4 {
        for c in (0..f_in).chain(width..width + f_in) {
            scrambled[0].weight[row * 2 * width + c] = r.random_range(-5.0..5.0);
        }
    }
    assert!(max_abs_diff(&run_edge_conv(&feats, f_in, &coords, &graph, &scrambled), &base) < 1e-15);
}

#[test]
fn pointwise_mlp_commutes_with_column_permutation() {
    let mut r = rng(55);
    let (f, n) = (5, 23);
    let x = random_tensor(&mut r, &[f, n]);
    let layers = random_mlp(&mut r, f, &[7, 6, 2]);
    let run = |data: Vec<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(&Tensor::new(vec![f, n], data).unwrap());
        let dense = bind(&mut tape, &layers);
        let out = pointwise_mlp(&mut tape, v, &dense, 0.2).unwrap();
        tape.value(out).to_vec()
    };
    let base = run(x.data().to_vec());
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let mut px = vec![0.0; f * n];
    for row in 0..f {
        for m in 0..n {
            px[row * n + m] = x.data()[row * n + perm[m]];
        }
    }
    let got = run(px);
    for row in 0..2 {
        for m in 0..n {
            assert_eq!(got[row * n + m], base[row * n + perm[m]]);
        }
    }
}

#[test]
fn pointwise_mlp_gradients_match_finite_differences() {
    let mut r = rng(56);
    let ins = [
        random_tensor(&mut r, &[3, 6]),
        random_tensor(&mut r, &[4, 3]),
        random_tensor(&mut r, &[4]),
        random_tensor(&mut r, &[2, 4]),
        random_tensor(&mut r, &[2]),
    ];
    let err = fd_max_rel_err(&ins, 1e-5, |t, v| {
        let layers = [Dense { weight: v[1], bias: v[2] }, Dense { weight: v[3], bias: v[4] }];
        pointwise_mlp(t, v[0], &layers, 0.2).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}
