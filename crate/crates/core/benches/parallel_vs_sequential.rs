use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fasten_core::data::{generate_blobs, BlobSpec, CALIBRATED_SPREAD};
use fasten_core::metrics::test_accuracy;
use fasten_core::nn::{backward_joint, JointBatch, JointObjective, LabeledInput, ModelParams};
use fasten_core::parallel;
use fasten_core::transition::{mc_bound_check, TransitionMatrix};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn blobs(per_class: usize) -> Vec<fasten_core::data::Sample> {
    generate_blobs(&BlobSpec {
        n_classes: 4,
        n_per_class: per_class,
        dim: 16,
        spread: CALIBRATED_SPREAD,
        seed: 7,
    })
    .unwrap()
}

fn backward(c: &mut Criterion) {
    let model = ModelParams::init(16, &[64, 64], 4, 1).unwrap();
    let samples = blobs(100);
    let t = TransitionMatrix::symmetric(4, 0.6).unwrap();
    let obj = JointObjective {
        transition: Some(&t),
        noisy_weight: 0.5,
    };
    let mut group = c.benchmark_group("backward_joint");
    for size in [40usize, 160] {
        let inputs: Vec<LabeledInput> = samples
            .iter()
            .step_by(samples.len() / size)
            .take(size)
            .map(|s| LabeledInput {
                x: s.x(),
                label: s.y_true(),
            })
            .collect();
        let batch = JointBatch {
            clean: inputs.clone(),
            noisy: inputs,
        };
        for (name, strict) in MODES {
            group.bench_with_input(BenchmarkId::new(name, size), &batch, |b, batch| {
                parallel::set_strict(strict);
                b.iter(|| backward_joint(black_box(&model), batch, &obj).unwrap());
            });
        }
    }
    group.finish();
    parallel::set_strict(false);
}

fn evaluation(c: &mut Criterion) {
    let model = ModelParams::init(16, &[64, 64], 4, 2).unwrap();
    let samples = blobs(1000);
    let mut group = c.benchmark_group("test_accuracy_4000");
    for (name, strict) in MODES {
        group.bench_function(name, |b| {
            parallel::set_strict(strict);
            b.iter(|| test_accuracy(black_box(&model), &samples).unwrap());
        });
    }
    group.finish();
    parallel::set_strict(false);
}

fn monte_carlo(c: &mut Criterion) {
    let oracle = TransitionMatrix::symmetric(4, 0.6).unwrap();
    let mut group = c.benchmark_group("mc_bound_check_k20");
    group.sample_size(20);
    for (name, strict) in MODES {
        group.bench_function(name, |b| {
            parallel::set_strict(strict);
            b.iter(|| mc_bound_check(&oracle, 20, 0.1, 10_000, 3).unwrap());
        });
    }
    group.finish();
    parallel::set_strict(false);
}

criterion_group!(benches, backward, evaluation, monte_carlo);
criterion_main!(benches);
