use stn_core::gradcheck::{covers_transform_kinds, gradcheck, relative_error, GradcheckConfig};

#[test]
fn audit_passes_across_seeds() {
    for seed in 0..5 {
        let report = gradcheck(&GradcheckConfig { seed, ..Default::default() }).unwrap();
        assert!(report.checks.len() >= 50);
        assert!(covers_transform_kinds(&report), "seed {seed} missed a transform family");
        assert!(report.passed(1e-4), "seed {seed}: max rel err {}", report.max_rel_err);
    }
}

#[test]
fn audit_is_deterministic() {
    let cfg = GradcheckConfig { seed: 7, num_params: 10, ..Default::default() };
    let a = gradcheck(&cfg).unwrap();
    let b = gradcheck(&cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn relative_error_uses_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
}
