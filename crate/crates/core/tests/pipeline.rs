//! End-to-end checks through the public API: data generation, splitting,
//! noise, every training method, and the CSV formats.

use fasten_core::baselines::train_method;
use fasten_core::data::{
    generate_blobs, noise_level, samples_from_csv, samples_to_csv, split, BlobSpec, DatasetSplits, NoiseKind,
    NoiseSpec, SplitFractions,
};
use fasten_core::nn::ModelParams;
use fasten_core::parallel;
use fasten_core::train::{train, Method, TrainConfig, TrainError};
use fasten_core::transition::TransitionMatrix;

fn splits(seed: u64, gamma: f64) -> DatasetSplits {
    let blobs = generate_blobs(&BlobSpec {
        n_classes: 4,
        n_per_class: 150,
        dim: 8,
        spread: 0.33,
        seed,
    })
    .unwrap();
    let fractions = SplitFractions {
        noisy_train: 0.6,
        clean_train: 0.1,
        valid: 0.1,
        test: 0.2,
    };
    let mut s = split(blobs, 4, fractions, seed, 4).unwrap();
    s.inject_noise(&NoiseSpec {
        kind: NoiseKind::Symmetric,
        gamma,
        pairing: None,
        seed,
    })
    .unwrap();
    s
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        k: 4,
        hidden: vec![16],
        ..TrainConfig::default()
    }
}

fn history_without_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn split_sizes_and_noise_level() {
    let s = splits(3, 0.6);
    assert_eq!(s.noisy_train.len(), 360);
    assert_eq!(s.clean_train.len(), 60);
    assert_eq!(s.valid.len(), 60);
    assert_eq!(s.test.len(), 120);
    assert!(s.clean_train.iter().all(|x| x.y_star() == x.y_true()));
    let level = noise_level(&s.noisy_train);
    assert!((level - 0.45).abs() < 0.1, "noise level {level}");
}

#[test]
fn noisy_dataset_csv_round_trips_byte_for_byte() {
    let s = splits(5, 0.4);
    let text = samples_to_csv(&s.noisy_train);
    let parsed = samples_from_csv(&text).unwrap();
    assert_eq!(parsed, s.noisy_train);
    assert_eq!(samples_to_csv(&parsed), text);
}

#[test]
fn every_method_trains_for_the_configured_epochs() {
    let config = small_config();
    let oracle = TransitionMatrix::symmetric(4, 0.5).unwrap();
    for method in Method::ALL {
        let mut s = splits(1, 0.5);
        let init = ModelParams::init(s.input_dim(), &config.hidden, 4, 9).unwrap();
        let trained = train_method(method, &config, &mut s, init, Some(&oracle))
            .unwrap_or_else(|e| panic!("{method}: {e:?}"));
        assert_eq!(trained.history.epochs.len(), config.epochs, "{method}");
        let acc = trained.history.selected_test_accuracy().unwrap();
        assert!(acc > 0.5, "{method} reached only {acc}");
    }
}

#[test]
fn strict_and_parallel_runs_agree_bitwise() {
    let config = small_config();
    let run = |strict: bool| {
        parallel::set_strict(strict);
        let mut s = splits(2, 0.6);
        let init = ModelParams::init(s.input_dim(), &config.hidden, 4, 11).unwrap();
        let trained = train(&config, &mut s, init).unwrap();
        parallel::set_strict(false);
        (history_without_seconds(&trained.history.to_csv()), trained.best, samples_to_csv(&s.noisy_train))
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn diverging_run_returns_partial_history() {
    let config = TrainConfig {
        lr: 1e300,
        ..small_config()
    };
    let mut s = splits(4, 0.5);
    let init = ModelParams::init(s.input_dim(), &config.hidden, 4, 1).unwrap();
    match train(&config, &mut s, init) {
        Err(TrainError::Aborted { history, .. }) => assert!(history.epochs.len() < config.epochs),
        other => panic!("expected an abort, got {:?}", other.map(|t| t.history.epochs.len())),
    }
}

#[test]
fn transition_csv_header_lists_class_indices() {
    let t = TransitionMatrix::symmetric(5, 0.3).unwrap();
    let csv = t.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "0,1,2,3,4");
    assert_eq!(TransitionMatrix::from_csv(&csv).unwrap(), t);
}
