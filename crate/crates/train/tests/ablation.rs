use stn_core::{Head, NetworkConfig, TransformFamily};
use stn_data::dataset::generate;
use stn_data::{DatasetConfig, ShapeKind};
use stn_train::ablation::{ablation_graphs, ablation_layers, graph_sweep_configs, without_layer, GraphSweep};
use stn_train::{ExperimentConfig, TrainConfig};

fn base() -> ExperimentConfig {
    let mut network = NetworkConfig::uniform(TransformFamily::Deformable, 2, 4, 4, Head::Segmentation(9));
    network.head_hidden = vec![8];
    ExperimentConfig {
        dataset: DatasetConfig {
            kinds: vec![ShapeKind::Table, ShapeKind::Rocket],
            per_kind: 2,
            n_points: 48,
            train_frac: 0.5,
            val_frac: 0.0,
            ..Default::default()
        },
        network,
        train: TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        },
    }
}

#[test]
fn sweep_widths_follow_both_regimes() {
    let cfgs = graph_sweep_configs(&base().network, TransformFamily::Deformable, GraphSweep::default()).unwrap();
    let got: Vec<(String, String, usize, usize)> = cfgs
        .iter()
        .map(|(r, v, f, c)| (r.clone(), v.clone(), *f, c.blocks[0].output_width()))
        .collect();
    let expect = [
        ("f=32", "fixed", 32, 32),
        ("f=32", "1", 32, 32),
        ("f=32", "2", 32, 64),
        ("f=32", "4", 32, 128),
        ("k*f=64", "fixed", 64, 64),
        ("k*f=64", "1", 64, 64),
        ("k*f=64", "2", 32, 64),
        ("k*f=64", "4", 16, 64),
    ];
    assert_eq!(got.len(), expect.len());
    for (g, e) in got.iter().zip(expect) {
        assert_eq!((g.0.as_str(), g.1.as_str(), g.2, g.3), e);
    }
    for (_, v, _, c) in &cfgs {
        let fam = c.blocks[2].transformers[0].family;
        assert_eq!(fam == TransformFamily::Fixed, v == "fixed");
        assert_eq!(c.blocks.len(), 3);
    }
    assert!(graph_sweep_configs(&base().network, TransformFamily::Deformable, GraphSweep { fixed_f: 4, budget: 6 }).is_err());
}

#[test]
fn graph_table_is_complete_and_reproducible() {
    let b = base();
    let ds = generate(&b.dataset).unwrap();
    let sweep = GraphSweep { fixed_f: 4, budget: 8 };
    let t1 = ablation_graphs(&ds, &b, TransformFamily::Deformable, sweep, &[0, 1]).unwrap();
    assert_eq!(t1.rows.len(), 16);
    assert!(t1.is_complete());
    let t2 = ablation_graphs(&ds, &b, TransformFamily::Deformable, sweep, &[0, 1]).unwrap();
    assert_eq!(t1.to_csv(), t2.to_csv());
    let csv = t1.to_csv();
    assert!(csv.starts_with("regime,variant,k,f,seed,val_metric,test_metric\n"));
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.lines().skip(1).all(|l| !l.ends_with(',')));
}

#[test]
fn layer_table_has_all_on_and_three_removals() {
    let b = base();
    let ds = generate(&b.dataset).unwrap();
    let t = ablation_layers(&ds, &b, &[5]).unwrap();
    let variants: Vec<&str> = t.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(variants, ["all-on", "minus-layer-1", "minus-layer-2", "minus-layer-3"]);
    assert!(t.is_complete());
    assert_eq!(t.to_csv(), ablation_layers(&ds, &b, &[5]).unwrap().to_csv());
}

#[test]
fn removing_a_layer_only_touches_that_block() {
    let net = base().network;
    let cut = without_layer(&net, 1);
    assert_eq!(cut.blocks[0], net.blocks[0]);
    assert_eq!(cut.blocks[2], net.blocks[2]);
    assert!(cut.blocks[1].transformers.iter().all(|t| t.family == TransformFamily::Fixed));
    assert_eq!(cut.blocks[1].output_width(), net.blocks[1].output_width());
}
