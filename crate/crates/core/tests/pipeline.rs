use std::fs;

use cyclicfl::checkpoint;
use cyclicfl::data::{dirichlet_partition, load_csv, load_idx, synth_blobs, CsvOptions};
use cyclicfl::landscape::{sharpness, slice_mlp, SliceSpec};
use cyclicfl::nn::{evaluate, Activation, ModelSpec};
use cyclicfl::orchestrator::{run_experiment, ExperimentConfig};
use cyclicfl::theory::{binary_labels, consistency, feature_matrix, GramInputs};
use cyclicfl::StrategyKind;

fn small_cfg(strategy: StrategyKind, m: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.m = m;
    cfg.p1.rounds = 3;
    cfg.p1.devices_per_round = 2;
    cfg.p2_rounds = 5;
    cfg.p2_fraction = 0.5;
    cfg.strategy = strategy;
    cfg.hp.lr = 0.1;
    cfg.hp.local_epochs = 2;
    cfg.seed = 4;
    cfg
}

#[test]
fn csv_to_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = synth_blobs(3, 4, 30, 0.3, 8);
    let mut text = String::from("f0,f1,f2,f3,label\n");
    for i in 0..blobs.len() {
        let row: Vec<String> = blobs.row(i).iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&format!("{},{}\n", row.join(","), blobs.labels()[i]));
    }
    let path = dir.path().join("blobs.csv");
    fs::write(&path, text).unwrap();

    let ds = load_csv(&path, CsvOptions { skip_header: true, num_classes: None }).unwrap();
    assert_eq!(ds.features(), blobs.features());
    let (train, test) = ds.split(0.2, 1).unwrap();
    let part = dirichlet_partition(&train, 6, 0.5, 2, 1).unwrap();
    let spec = ModelSpec::new(4, vec![10], 3, Activation::Relu);
    let out = run_experiment(&small_cfg(StrategyKind::FedProx, 6), &spec, &train, &test, &part).unwrap();

    let ckpt = dir.path().join("model.bin");
    checkpoint::save(&ckpt, &out.final_params).unwrap();
    let restored = checkpoint::load(&ckpt).unwrap();
    assert_eq!(restored, out.final_params);
    let acc = evaluate(&spec, &restored, &test).unwrap().accuracy;
    assert_eq!(Some(acc), out.logs.last().unwrap().test_acc);
}

#[test]
fn idx_files_feed_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (n, rows, cols) = (40usize, 2u32, 3u32);
    let mut images = vec![0, 0, 8, 3];
    images.extend((n as u32).to_be_bytes());
    images.extend(rows.to_be_bytes());
    images.extend(cols.to_be_bytes());
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let class = (i % 2) as u8;
        labels.push(class);
        images.extend((0..6).map(|k| if (k < 3) == (class == 0) { 200 } else { 10 + (i % 7) as u8 }));
    }
    fs::write(dir.path().join("img"), images).unwrap();
    fs::write(dir.path().join("lbl"), labels).unwrap();
    let ds = load_idx(dir.path().join("img"), dir.path().join("lbl")).unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.num_classes()), (40, 6, 2));

    let (train, test) = ds.split(0.25, 0).unwrap();
    let part = dirichlet_partition(&train, 4, 1.0, 0, 1).unwrap();
    let spec = ModelSpec::new(6, vec![4], 2, Activation::Tanh);
    let mut cfg = small_cfg(StrategyKind::FedAvg, 4);
    cfg.p2_rounds = 20;
    cfg.hp.lr = 0.5;
    let out = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
    assert_eq!(out.logs.last().unwrap().test_acc, Some(1.0));
}

#[test]
fn every_strategy_is_thread_count_independent() {
    let ds = synth_blobs(4, 5, 40, 0.4, 3);
    let (train, test) = ds.split(0.25, 3).unwrap();
    let part = dirichlet_partition(&train, 8, 0.3, 3, 2).unwrap();
    let spec = ModelSpec::new(5, vec![8], 4, Activation::Relu);
    for strategy in StrategyKind::ALL {
        let mut cfg = small_cfg(strategy, 8);
        let one = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
        cfg.threads = 3;
        let three = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
        let fp = |o: &cyclicfl::orchestrator::ExperimentOutcome| {
            o.logs.iter().map(|l| (l.input_fingerprint, l.output_fingerprint)).collect::<Vec<_>>()
        };
        assert_eq!(fp(&one), fp(&three), "{strategy}");
        assert_eq!(one.final_params, three.final_params);
    }
}

#[test]
fn scrambled_labels_are_less_consistent() {
    let ds = synth_blobs(3, 10, 30, 0.2, 5);
    let p: Vec<usize> = (0..ds.len()).step_by(2).collect();
    let q: Vec<usize> = (1..ds.len()).step_by(2).collect();
    let y = |idx: &[usize]| binary_labels(&idx.iter().map(|&i| ds.labels()[i]).collect::<Vec<_>>(), 0);
    let matched = GramInputs {
        x_p: feature_matrix(&ds, &p),
        y_p: y(&p),
        x_q: feature_matrix(&ds, &q),
        y_q: y(&q),
    };
    // relabel P through the class permutation 0 → 1 → 2 → 0
    let permuted: Vec<usize> = p.iter().map(|&i| (ds.labels()[i] + 1) % 3).collect();
    let scrambled = GramInputs { y_p: binary_labels(&permuted, 0), ..matched.clone() };
    let good = consistency(&matched, 1e-6).unwrap().discrepancy;
    let bad = consistency(&scrambled, 1e-6).unwrap().discrepancy;
    assert!(good < bad, "matched {good} scrambled {bad}");
}

#[test]
fn trained_models_sit_in_a_basin() {
    let ds = synth_blobs(3, 4, 40, 0.3, 2);
    let (train, test) = ds.split(0.25, 2).unwrap();
    let part = dirichlet_partition(&train, 4, 1.0, 2, 1).unwrap();
    let spec = ModelSpec::new(4, vec![8], 3, Activation::Relu);
    let mut cfg = small_cfg(StrategyKind::FedAvg, 4);
    cfg.p2_rounds = 30;
    let out = run_experiment(&cfg, &spec, &train, &test, &part).unwrap();
    let all: Vec<usize> = (0..train.len()).collect();
    let probe = train.batch(&all).unwrap();
    let grid = slice_mlp(&spec, &out.final_params, &probe, &SliceSpec { resolution: 11, ..SliceSpec::default() }).unwrap();
    assert!(sharpness(&grid) > 0.0);
    assert!(grid.values.iter().all(|v| *v >= grid.center() - 0.05));
}
