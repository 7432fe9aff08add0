mod common;

use common::oracles::{random_coords, rng};
use proptest::prelude::*;
use rand::Rng;
use stn_core::geometry::{random_rigid, PointCloud};
use stn_core::neighborhood::{knn_graph, knn_oracle, pairwise_sq_dist};

fn rigid_scaled(coords: &[f64], seed: u64, scale: f64) -> Vec<f64> {
    let n = coords.len() / 3;
    let cloud = PointCloud::new((0..n).map(|i| [coords[i], coords[n + i], coords[2 * n + i]]).collect()).unwrap();
    let (rot, t) = random_rigid(seed);
    let moved = cloud.transformed(&rot, t).unwrap();
    moved.coords().data().iter().map(|v| v * scale).collect()
}

#[test]
fn pairwise_matches_naive_double_loop() {
    let mut r = rng(40);
    let n = 64;
    let c = random_coords(&mut r, n);
    let d = pairwise_sq_dist(&c).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let naive: f64 = (0..3).map(|a| (c[a * n + i] - c[a * n + j]).powi(2)).sum();
            worst = worst.max((naive - d[i * n + j]).abs());
            assert_eq!(d[i * n + j], d[j * n + i]);
        }
        assert_eq!(d[i * n + i], 0.0);
    }
    assert!(worst < 1e-12);
}

#[test]
fn two_hundred_points_k20_matches_oracle() {
    let mut r = rng(41);
    let c = random_coords(&mut r, 200);
    assert_eq!(knn_graph(&c, 20).unwrap(), knn_oracle(&c, 20).unwrap());
}

#[test]
fn matches_oracle_up_to_512_points() {
    let mut r = rng(42);
    for &n in &[2usize, 3, 17, 64, 255, 512] {
        let c = random_coords(&mut r, n);
        for k in [1, (n - 1).min(7), n - 1] {
            assert_eq!(knn_graph(&c, k).unwrap(), knn_oracle(&c, k).unwrap(), "n={n} k={k}");
        }
    }
}

#[test]
fn heavy_ties_match_oracle() {
    // integer lattice: many equal distances
    let mut coords = vec![Vec::new(), Vec::new(), Vec::new()];
    for x in 0..4 {
        for y in 0..4 {
            for z in 0..3 {
                coords[0].push(x as f64);
                coords[1].push(y as f64);
                coords[2].push(z as f64);
            }
        }
    }
    let c = coords.concat();
    for k in [1, 4, 6, 13, 47] {
        assert_eq!(knn_graph(&c, k).unwrap(), knn_oracle(&c, k).unwrap());
    }
}

#[test]
fn rigid_and_scale_invariance() {
    let mut r = rng(43);
    for trial in 0..100u64 {
        let n = r.random_range(16..128);
        let k = r.random_range(1..12);
        let c = random_coords(&mut r, n);
        let s = 10f64.powf(r.random_range(-2.0..2.0));
        let base = knn_graph(&c, k).unwrap();
        assert_eq!(knn_graph(&rigid_scaled(&c, trial, s), k).unwrap(), base, "trial {trial}");
    }
}

#[test]
fn graph_rows_are_well_formed() {
    let mut r = rng(44);
    let n = 150;
    let c = random_coords(&mut r, n);
    let d = pairwise_sq_dist(&c).unwrap();
    let g = knn_graph(&c, 12).unwrap();
    for i in 0..n {
        let row = g.row(i);
        assert!(row.iter().all(|&j| j < n && j != i));
        let mut seen = row.to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), row.len());
        for w in row.windows(2) {
            let (a, b) = (d[i * n + w[0]], d[i * n + w[1]]);
            assert!(a < b || (a == b && w[0] < w[1]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prefix_monotonicity(n in 3usize..80, seed in any::<u64>(), k_frac in 0.0f64..1.0, kp_frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let c = random_coords(&mut r, n);
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        let kp = 1 + ((k - 1) as f64 * kp_frac) as usize;
        let big = knn_graph(&c, k).unwrap();
        prop_assert_eq!(big.truncated(kp), knn_graph(&c, kp).unwrap());
    }

    #[test]
    fn agrees_with_oracle(n in 2usize..120, seed in any::<u64>(), k_frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let c = random_coords(&mut r, n);
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        prop_assert_eq!(knn_graph(&c, k).unwrap(), knn_oracle(&c, k).unwrap());
    }
}
