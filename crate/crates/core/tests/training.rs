mod common;

use std::collections::BTreeMap;

use cyclone_core::checkpoint::{load_checkpoint, save_ensemble};
use cyclone_core::dataset::synth::{synth_generate_with, SynthConfig};
use cyclone_core::dataset::{event_disjoint_split, BatchSampler, DatasetIndex};
use cyclone_core::models::{
    bootstrap_subsets, bootstrap_train_ensemble, expert_ranges, train_experts, OverlapPolicy, SaffirSimpsonCategory,
};
use cyclone_core::network::{Model, NetworkConfig};
use cyclone_core::predict::SpeedPredictor;
use cyclone_core::training::{train, train_model, AdamConfig, TrainConfig, TrainingHyper};
use cyclone_core::Error;

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        conv_channels: vec![4, 4, 8, 8, 8],
        fc_widths: vec![16, 1],
        ..NetworkConfig::small()
    }
}

fn hyper(epochs: usize, steps: usize) -> TrainingHyper {
    TrainingHyper {
        network: tiny_net(),
        sampler: Default::default(),
        train: TrainConfig {
            epochs,
            steps_per_epoch: Some(steps),
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            early_stopping_patience: None,
        },
    }
}

fn data(n: usize, seed: u64, max: f32) -> DatasetIndex {
    let cfg = SynthConfig {
        speed_max: max,
        ..SynthConfig::new(n, 32, seed)
    };
    synth_generate_with(&cfg).unwrap().index
}

#[test]
fn loss_decreases_and_history_is_recorded() {
    let d = data(300, 1, 185.0);
    let (train_set, val) = event_disjoint_split(&d, 0.2, 1).unwrap();
    let (model, report) = train_model(&train_set, &hyper(6, 4), Some(&val), 1).unwrap();
    assert_eq!(report.epochs.len(), 6);
    let first = report.epochs[0].train_msle;
    let last = report.epochs[5].train_msle;
    assert!(last < first, "msle {first} -> {last}");
    assert!(report.epochs.iter().all(|e| e.val_rmse.is_some()));
    assert_eq!(model.mode(), cyclone_core::graph::Mode::Eval);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with("epoch,train_msle,val_rmse,seconds\n"));
}

#[test]
fn training_is_deterministic() {
    let d = data(200, 2, 185.0);
    let (a, ra) = train_model(&d, &hyper(2, 3), None, 9).unwrap();
    let (b, rb) = train_model(&d, &hyper(2, 3), None, 9).unwrap();
    for ((_, _, x), (_, _, y)) in a.tensors().into_iter().zip(b.tensors()) {
        assert_eq!(x, y);
    }
    let msle = |r: &cyclone_core::training::TrainReport| r.epochs.iter().map(|e| e.train_msle).collect::<Vec<_>>();
    assert_eq!(msle(&ra), msle(&rb));
}

#[test]
fn divergence_is_reported_as_non_finite() {
    let d = data(200, 3, 185.0);
    let mut h = hyper(20, 5);
    h.train.adam.learning_rate = 1e12;
    let mut model = Model::build(h.network.clone(), 0).unwrap();
    let sampler = BatchSampler::new(&d, h.sampler.clone()).unwrap();
    match train(&mut model, &sampler, &h.train, None, 0) {
        Err(e @ Error::NonFinite { .. }) => assert_eq!(e.kind(), cyclone_core::ErrorKind::Numeric),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn early_stopping_keeps_best_weights() {
    let d = data(300, 4, 185.0);
    let (train_set, val) = event_disjoint_split(&d, 0.3, 4).unwrap();
    let mut h = hyper(30, 2);
    h.train.adam.learning_rate = 0.05;
    h.train.early_stopping_patience = Some(2);
    let (model, report) = train_model(&train_set, &h, Some(&val), 4).unwrap();
    let best = report.epochs.iter().filter_map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
    let (eval, _) = cyclone_core::eval::evaluate(&model, &val).unwrap();
    if report.stopped_early {
        assert!((eval.rmse - best).abs() < 1e-3, "restored {} vs best {best}", eval.rmse);
    }
}

#[test]
fn ensemble_of_one_predicts_like_its_member() {
    let d = data(200, 5, 185.0);
    let t = bootstrap_train_ensemble(&d, 1, &hyper(1, 2), None, 5).unwrap();
    assert_eq!(t.ensemble.len(), 1);
    let images: Vec<_> = d.samples().iter().take(10).map(|s| s.image.as_ref()).collect();
    assert_eq!(
        t.ensemble.predict_speeds(&images).unwrap(),
        t.ensemble.members()[0].predict_speeds(&images).unwrap()
    );
}

#[test]
fn member_subsets_cover_speeds_and_are_seeded() {
    let d = data(600, 6, 185.0);
    let full: Vec<u32> = d.speeds().collect();
    let a = bootstrap_subsets(&d, 5, 77);
    let b = bootstrap_subsets(&d, 5, 77);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.speeds().collect::<Vec<_>>(), full);
        let ids = |i: &DatasetIndex| i.samples().iter().map(|s| s.image_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(x), ids(y));
    }
    assert_ne!(a[0].samples().len(), 0);
}

#[test]
fn experts_follow_the_data_range() {
    let d = data(300, 7, 60.0);
    let max = d.max_speed().unwrap() as f64;
    let none: BTreeMap<_, _> = expert_ranges(max, OverlapPolicy::None).into_iter().collect();
    let third: BTreeMap<_, _> = expert_ranges(max, OverlapPolicy::OneThirdAdjacent).into_iter().collect();
    let t = train_experts(&d, &none, &hyper(1, 1), None, 7).unwrap();
    let got: Vec<_> = t.experts.keys().copied().collect();
    assert_eq!(got, vec![SaffirSimpsonCategory::TD, SaffirSimpsonCategory::TS]);
    assert_eq!(t.missing.len(), 5);
    for (c, r) in &none {
        let narrow = d.filter(|s| r.contains(s.wind_speed as f64));
        let wide = d.filter(|s| third[c].contains(s.wind_speed as f64));
        assert!(narrow.samples().iter().all(|s| r.contains(s.wind_speed as f64)));
        assert!(wide.len() >= narrow.len(), "{c}");
    }
}

#[test]
fn ensemble_checkpoint_round_trip() {
    let d = data(200, 8, 185.0);
    let t = bootstrap_train_ensemble(&d, 2, &hyper(1, 1), None, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_ensemble(&t.ensemble, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.kind(), "ensemble");
    assert_eq!(back.member_count(), 2);
    let images: Vec<_> = d.samples().iter().map(|s| s.image.as_ref()).collect();
    assert_eq!(back.predict_speeds(&images).unwrap(), t.ensemble.predict_speeds(&images).unwrap());
}
