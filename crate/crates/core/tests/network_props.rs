mod common;

use common::oracles::{naive_fixed_seg_logits, random_coords, rng};
use rand::seq::SliceRandom;
use stn_core::geometry::apply_affine;
use stn_core::network::{init_params, BlockConfig, Head, NetworkConfig, ParamKind, TransformFamily, TransformerSpec};
use stn_core::tensor::{Tape, Tensor};
use stn_core::{Network, Network32, Tape32, Tensor32};

fn small(family: TransformFamily, graphs: usize, f: usize, k_nn: usize, head: Head) -> NetworkConfig {
    let mut cfg = NetworkConfig::uniform(family, graphs, f, k_nn, head);
    cfg.head_hidden = vec![16];
    cfg
}

fn coords_tensor(c: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![3, c.len() / 3], c.to_vec()).unwrap()
}

fn mixed_config(seed: u64) -> NetworkConfig {
    let block = |k_nn| BlockConfig {
        transformers: [TransformFamily::Affine, TransformFamily::Projective, TransformFamily::Deformable, TransformFamily::Fixed]
            .into_iter()
            .map(|f| TransformerSpec::new(f, 4))
            .collect(),
        k_nn,
    };
    NetworkConfig {
        blocks: vec![block(5), block(6), block(4)],
        head: Head::Segmentation(4),
        head_hidden: vec![12],
        leaky_slope: 0.2,
        seed,
    }
}

fn seg_logits(net: &Network, c: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let fwd = net.forward(&mut tape, &vars, &coords_tensor(c)).unwrap();
    tape.value(fwd.logits).to_vec()
}

#[test]
fn four_graphs_of_width_32_give_128_channels() {
    let cfg = small(TransformFamily::Deformable, 4, 32, 4, Head::Segmentation(3));
    assert!(cfg.blocks.iter().all(|b| b.output_width() == 128));
    let net: Network = init_params(&cfg, 0).unwrap();
    let c = random_coords(&mut rng(60), 24);
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let fwd = net.forward(&mut tape, &vars, &coords_tensor(&c)).unwrap();
    for &out in &fwd.block_outputs {
        assert_eq!(tape.shape(out), &[128, 24]);
    }
    assert_eq!(tape.shape(fwd.logits), &[3, 24]);
}

#[test]
fn fixed_network_matches_plain_loops() {
    let cfg = small(TransformFamily::Fixed, 1, 6, 5, Head::Segmentation(4));
    for seed in 0..3 {
        let net: Network = init_params(&cfg, seed).unwrap();
        let c = random_coords(&mut rng(61 + seed), 50);
        let got = seg_logits(&net, &c);
        let want = naive_fixed_seg_logits(&net, &c);
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
    let cfg = small(TransformFamily::Fixed, 3, 4, 3, Head::Segmentation(2));
    let net: Network = init_params(&cfg, 9).unwrap();
    let c = random_coords(&mut rng(64), 30);
    let diff = seg_logits(&net, &c)
        .iter()
        .zip(naive_fixed_seg_logits(&net, &c))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn identical_transformers_duplicate_their_halves() {
    for family in [TransformFamily::Affine, TransformFamily::Projective, TransformFamily::Deformable, TransformFamily::Fixed] {
        let cfg = small(family, 2, 5, 4, Head::Segmentation(3));
        let mut net: Network = init_params(&cfg, 3).unwrap();
        let copies: Vec<(usize, Tensor<f64>)> = (0..net.params().len())
            .filter_map(|i| {
                let p = net.params().get(i);
                let twin = p.name.strip_prefix("block0.tf1")?;
                let src = net.params().by_name(&format!("block0.tf0{twin}")).unwrap();
                Some((i, src.tensor.clone()))
            })
            .collect();
        assert!(!copies.is_empty());
        for (i, t) in copies {
            net.params_mut().get_mut(i).tensor = t;
        }
        let c = random_coords(&mut rng(65), 30);
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape);
        let fwd = net.forward(&mut tape, &vars, &coords_tensor(&c)).unwrap();
        let out = tape.value(fwd.block_outputs[0]);
        let half = 5 * 30;
        assert_eq!(&out[..half], &out[half..], "{family:?}");
    }
}

#[test]
fn segmentation_is_permutation_equivariant() {
    let net: Network = init_params(&mixed_config(1), 1).unwrap();
    let mut r = rng(66);
    let n = 40;
    let c = random_coords(&mut r, n);
    let base = seg_logits(&net, &c);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let mut pc = vec![0.0; 3 * n];
    for d in 0..3 {
        for m in 0..n {
            pc[d * n + m] = c[d * n + perm[m]];
        }
    }
    let got = seg_logits(&net, &pc);
    for cls in 0..4 {
        for m in 0..n {
            assert!((got[cls * n + m] - base[cls * n + perm[m]]).abs() < 1e-12);
        }
    }
}

#[test]
fn classification_head_ignores_duplicated_columns() {
    let cfg = small(TransformFamily::Affine, 2, 4, 4, Head::Classification(5));
    let net: Network = init_params(&cfg, 2).unwrap();
    let mut r = rng(67);
    let n = 20;
    let width = 24;
    let skip = common::oracles::random_tensor(&mut r, &[width, n]);
    let mut doubled = Vec::with_capacity(2 * width * n);
    for row in skip.data().chunks(n) {
        doubled.extend_from_slice(row);
        doubled.extend_from_slice(row);
    }
    let logits = |t: Tensor<f64>| {
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape);
        let s = tape.constant(&t);
        let out = net.cls_head(&mut tape, &vars, s).unwrap();
        tape.value(out).to_vec()
    };
    let a = logits(skip);
    let b = logits(Tensor::new(vec![width, 2 * n], doubled).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
}

#[test]
fn classification_logits_are_finite() {
    let mut cfg = mixed_config(0);
    cfg.head = Head::Classification(6);
    for seed in 0..100 {
        let net: Network = init_params(&cfg, seed).unwrap();
        let c = random_coords(&mut rng(1000 + seed), 32);
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape);
        let fwd = net.forward(&mut tape, &vars, &coords_tensor(&c)).unwrap();
        assert_eq!(tape.shape(fwd.logits), &[6, 1]);
        assert!(tape.value(fwd.logits).iter().all(|v| v.is_finite()), "seed {seed}");
    }
}

#[test]
fn init_is_deterministic() {
    let cfg = mixed_config(4);
    let a: Network = init_params(&cfg, 11).unwrap();
    let b: Network = init_params(&cfg, 11).unwrap();
    assert_eq!(a, b);
    let c: Network = init_params(&cfg, 12).unwrap();
    assert_ne!(a, c);
}

#[test]
fn affine_init_moments() {
    let cfg = small(TransformFamily::Affine, 4, 2, 2, Head::Segmentation(2));
    let mut draws = Vec::new();
    let mut seed = 0;
    while draws.len() < 10_000 {
        let net: Network = init_params(&cfg, seed).unwrap();
        for p in net.params().iter().filter(|p| p.kind == ParamKind::Transform) {
            draws.extend_from_slice(p.tensor.data());
        }
        seed += 1;
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn applied_matrix_has_unit_norm() {
    let cfg = small(TransformFamily::Affine, 2, 2, 2, Head::Segmentation(2));
    let net: Network = init_params(&cfg, 5).unwrap();
    for p in net.params().iter().filter(|p| p.kind == ParamKind::Transform) {
        let mut tape = Tape::new();
        let a = tape.leaf(&p.tensor);
        let eye = tape.constant(&Tensor::identity(3));
        let g = apply_affine(&mut tape, a, eye).unwrap();
        let norm = tape.value(g).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradient_reaches_every_transform_matrix() {
    let net: Network = init_params(&mixed_config(2), 2).unwrap();
    let n = 48;
    let c = random_coords(&mut rng(68), n);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let (loss, _) = net.loss(&mut tape, &vars, &coords_tensor(&c), &labels).unwrap();
    tape.backward(loss).unwrap();
    let idx = net.transform_param_indices();
    assert_eq!(idx.len(), 9);
    for i in idx {
        let g = tape.grad(vars[i]).expect("transform gradient");
        assert!(g.iter().all(|v| v.is_finite()));
        let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.0, "{} has zero gradient", net.params().get(i).name);
    }
}

#[test]
fn frozen_transforms_get_no_gradient() {
    let net: Network = init_params(&mixed_config(3), 3).unwrap().freeze_transforms();
    let n = 32;
    let c = random_coords(&mut rng(69), n);
    let labels = vec![1; n];
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let (loss, _) = net.loss(&mut tape, &vars, &coords_tensor(&c), &labels).unwrap();
    tape.backward(loss).unwrap();
    for (p, &v) in net.params().iter().zip(&vars) {
        assert_eq!(p.frozen, p.kind == ParamKind::Transform);
        if p.frozen {
            assert!(tape.grad(v).is_none());
        } else {
            assert!(tape.grad(v).is_some(), "{}", p.name);
        }
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    for (seed, classes) in [(0u64, 4usize), (1, 9), (2, 3)] {
        let mut cfg = mixed_config(seed);
        cfg.head = Head::Segmentation(classes);
        let net: Network = init_params(&cfg, seed).unwrap();
        let n = 64;
        let c = random_coords(&mut rng(70 + seed), n);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape);
        let (loss, _) = net.loss(&mut tape, &vars, &coords_tensor(&c), &labels).unwrap();
        let l = tape.scalar(loss);
        assert!((l - (classes as f64).ln()).abs() < 0.5, "loss {l} for C={classes}");
    }
}

#[test]
fn single_precision_forward_and_backward() {
    let cfg = mixed_config(5);
    let net: Network32 = init_params(&cfg, 5).unwrap();
    let c: Vec<f32> = random_coords(&mut rng(71), 40).into_iter().map(|v| v as f32).collect();
    let coords = Tensor32::new(vec![3, 40], c).unwrap();
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let mut tape = Tape32::new();
    let vars = net.params().bind(&mut tape);
    let (loss, _) = net.loss(&mut tape, &vars, &coords, &labels).unwrap();
    assert!(tape.scalar(loss).is_finite());
    tape.backward(loss).unwrap();
    for &v in &vars {
        assert!(tape.grad(v).unwrap().iter().all(|g| g.is_finite()));
    }
}
