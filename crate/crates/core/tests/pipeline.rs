//! End-to-end runs on a small synthetic digit set, so they need no MNIST files.

use std::sync::Arc;

use taugate::data::{Dataset, LabeledImage, Mode, Split, PIXELS, SIDE};
use taugate::model::checkpoint;
use taugate::model::{predict, GateMode, Method};
use taugate::ndcore::{Real, Rng};
use taugate::report::{
    aggregate, build_foundation, read_results_csv, run_matrix, write_reports, write_results_csv,
    ArtifactPaths, ExperimentData, RunOptions,
};
use taugate::train::{specialize, streams, TrainConfig};

/// Class `k` is a bright bar at row band `2k+4`, plus noise.
fn synthetic(n: usize, split: Split, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let images = (0..n)
        .map(|i| {
            let label = (i % 10) as u8;
            let mut px = vec![0.0; PIXELS];
            let row = 4 + 2 * label as usize;
            for c in 6..22 {
                px[row * SIDE + c] = 1.0;
                px[(row + 1) * SIDE + c] = 0.7;
            }
            for p in px.iter_mut() {
                *p = (*p + 0.1 * rng.uniform()).min(1.0);
            }
            LabeledImage {
                pixels: Arc::from(px),
                label,
                mode: Mode::Deg0,
            }
        })
        .collect();
    Dataset { images, split }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        train_limit: None,
        ..TrainConfig::default()
    }
}

fn data() -> ExperimentData {
    ExperimentData::from_datasets(synthetic(400, Split::Train, 1), synthetic(200, Split::Test, 2), None)
}

#[test]
fn matrix_is_deterministic_and_roundtrips() {
    let data = data();
    let opts = RunOptions {
        seeds: vec![0, 1],
        cfg: small_cfg(),
        extras: true,
        ..RunOptions::default()
    };
    let a = run_matrix(&data, &opts).unwrap();
    let b = run_matrix(&data, &opts).unwrap();
    let bytes = write_results_csv(&a).unwrap();
    assert_eq!(bytes, write_results_csv(&b).unwrap());
    assert_eq!(a.records.len(), 14);
    assert_eq!(a.overlaps().len(), 2);

    let back = read_results_csv(&bytes).unwrap();
    assert_eq!(write_results_csv(&back).unwrap(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let paths = ArtifactPaths::under(dir.path());
    let written = write_reports(&back, &paths).unwrap();
    assert_eq!(written.len(), 4);
    let first = std::fs::read(&paths.main_table).unwrap();
    write_reports(&read_results_csv(&bytes).unwrap(), &paths).unwrap();
    assert_eq!(std::fs::read(&paths.main_table).unwrap(), first);

    // Foundation is shared within a seed and differs across seeds.
    let sums: Vec<(&u64, &str)> = a.records.iter().map(|r| (&r.seed, r.foundation_checksum.as_str())).collect();
    assert!(sums.iter().filter(|s| *s.0 == 0).all(|s| s.1 == sums[0].1));
    assert!(sums.iter().filter(|s| *s.0 == 1).all(|s| s.1 != sums[0].1));

    let rows = aggregate(&a.records);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.acc_45deg_mean)));
    let frozen = rows.iter().find(|r| r.method == Method::Frozen).unwrap();
    assert!(frozen.acc_0deg_mean > 0.5, "foundation should learn the toy task");
}

#[test]
fn different_seed_different_results() {
    let data = data();
    let run = |seed| {
        write_results_csv(
            &run_matrix(
                &data,
                &RunOptions {
                    methods: vec![Method::TauGate],
                    seeds: vec![seed],
                    cfg: small_cfg(),
                    ..RunOptions::default()
                },
            )
            .unwrap(),
        )
        .unwrap()
    };
    assert_ne!(run(0), run(5));
}

#[test]
fn trained_adapter_checkpoint_reproduces_logits() {
    let data = data();
    let cfg = small_cfg();
    let bb = build_foundation(&data, &cfg).unwrap();
    let x = data.test_45.head_batch(64).inputs;
    for m in [Method::TauGate, Method::Lora, Method::BitFit] {
        let ad = specialize(&bb, m, &data.train_45, &cfg, &mut cfg.rng(streams::ADAPTER_INIT))
            .unwrap()
            .adapter;
        let (bb2, ad2) = checkpoint::decode(&checkpoint::encode(&bb, &ad)).unwrap();
        let before = predict(&bb, &ad, &x, GateMode::Soft).unwrap();
        let after = predict(&bb2, &ad2, &x, GateMode::Soft).unwrap();
        assert_eq!(before.max_abs_diff(&after), 0.0, "{m}");
    }
}

#[test]
fn hard_gate_evaluation_runs() {
    let data = data();
    let out = run_matrix(
        &data,
        &RunOptions {
            methods: vec![Method::Frozen, Method::TauGate],
            seeds: vec![0],
            cfg: small_cfg(),
            extras: false,
            gate_mode: GateMode::Hard,
        },
    )
    .unwrap();
    let acc: Vec<Real> = out.records.iter().map(|r| r.acc_45deg).collect();
    assert!(acc.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(out.overlaps().is_empty());
}
