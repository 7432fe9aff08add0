use stn_train::{adam_step, AdamConfig, AdamState};

fn minimize_sq_norm(lr: f64, steps: usize) -> f64 {
    let mut x = vec![5.0f64, 5.0];
    let mut s = AdamState::new(2);
    let cfg = AdamConfig { lr, ..Default::default() };
    for _ in 0..steps {
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        adam_step(&mut x, &g, &mut s, &cfg, "x").unwrap();
    }
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn sq_norm_from_five_five_converges_in_100_steps() {
    let norm = minimize_sq_norm(0.2, 100);
    assert!(norm < 1e-2, "{norm}");
}

#[test]
fn default_lr_moves_at_most_lr_per_step() {
    // each coordinate moves by about lr per step, so 100 steps cover ~0.1
    let norm = minimize_sq_norm(AdamConfig::default().lr, 100);
    assert!((norm - (2.0f64.sqrt() * 4.9)).abs() < 0.01, "{norm}");
}
