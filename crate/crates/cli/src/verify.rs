//! The acceptance suite behind `fasten verify`. Expected values are computed
//! here from first principles (frequency counts, pairwise comparisons,
//! closed forms), never by calling the code under test.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use rand::seq::SliceRandom;

use fasten_core::baselines::glc_stages;
use fasten_core::data::{inject_symmetric_noise, NoiseKind, Sample};
use fasten_core::metrics::{auprc, auroc};
use fasten_core::nn::{finite_diff_check, JointBatch, JointObjective, LabeledInput, ModelParams};
use fasten_core::parallel;
use fasten_core::seed;
use fasten_core::train::{Method, RunHistory, TrainConfig};
use fasten_core::transition::{
    chi2_divergence, estimate_transition, hoeffding_bound, mc_bound_check, true_transition_empirical,
    TransitionMatrix,
};

use crate::config::{DatasetConfig, ExperimentConfig, NoiseConfig, ResolvedRun};
use crate::runner::{self, prepare, train_run, RunOptions};
use crate::summary;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2}. {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

fn result(id: u8, name: &'static str, passed: bool, detail: String) -> CriterionResult {
    CriterionResult {
        id,
        name,
        passed,
        detail,
    }
}

/// Settings of one desk-scale training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Setup {
    pub method: Method,
    pub gamma: f64,
    pub k: usize,
    pub perturbation_rate: f64,
}

impl Setup {
    pub fn new(method: Method, gamma: f64) -> Self {
        Setup {
            method,
            gamma,
            k: 10,
            perturbation_rate: 0.0,
        }
    }

    fn key(&self) -> String {
        format!("{:?}|{}|{}|{}", self.method, self.gamma, self.k, self.perturbation_rate)
    }

    pub fn resolve(&self, seed: u64) -> ResolvedRun {
        let config = ExperimentConfig {
            method: self.method,
            seeds: vec![seed],
            out_dir: PathBuf::new(),
            transition_snapshots: false,
            write_dataset: false,
            dataset: DatasetConfig::default(),
            noise: NoiseConfig {
                kind: NoiseKind::Symmetric,
                gamma: self.gamma,
                pairing: None,
            },
            train: TrainConfig {
                k: self.k,
                perturbation_rate: self.perturbation_rate,
                ..TrainConfig::default()
            },
            sweep: None,
        };
        config.resolve(None, seed)
    }
}

/// Memoized desk-scale runs, shared by the criteria.
#[derive(Default)]
pub struct Lab {
    runs: Mutex<HashMap<(String, u64), RunHistory>>,
}

impl Lab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Histories for every seed, training missing ones in parallel.
    pub fn histories(&self, setup: &Setup, seeds: &[u64]) -> Vec<RunHistory> {
        let missing: Vec<u64> = {
            let runs = self.runs.lock().unwrap();
            seeds
                .iter()
                .copied()
                .filter(|s| !runs.contains_key(&(setup.key(), *s)))
                .collect()
        };
        let fresh = parallel::map_slice(&missing, |&s| (s, train_once(setup, s)));
        let mut runs = self.runs.lock().unwrap();
        for (s, h) in fresh {
            runs.insert((setup.key(), s), h);
        }
        seeds.iter().map(|s| runs[&(setup.key(), *s)].clone()).collect()
    }

    pub fn mean_accuracy(&self, setup: &Setup) -> f64 {
        let h = self.histories(setup, &SEEDS);
        h.iter().map(selected_accuracy).sum::<f64>() / h.len() as f64
    }
}

fn train_once(setup: &Setup, seed: u64) -> RunHistory {
    let run = setup.resolve(seed);
    let mut prepared = prepare(&run).expect("desk-scale setup is valid");
    train_run(&run, &mut prepared)
        .unwrap_or_else(|e| panic!("{} seed {seed} failed: {e}", setup.method))
        .history
}

fn selected_accuracy(h: &RunHistory) -> f64 {
    h.selected_test_accuracy().expect("at least one epoch")
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// Criterion 1: Analytic gradients against central differences on a random two-layer
/// network with all three loss terms active.
pub fn gradient_oracle() -> CriterionResult {
    let mut rng = seed::stream_rng(101, 0);
    let model = ModelParams::init(5, &[8, 6], 3, 17).unwrap();
    let xs: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
    let rows: Vec<f64> = (0..3)
        .flat_map(|_| {
            let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(move |v| v / s)
        })
        .collect();
    let t = TransitionMatrix::new(3, rows).unwrap();
    let input = |i: usize| LabeledInput {
        x: &xs[i],
        label: labels[i],
    };
    let batch = JointBatch {
        clean: (0..6).map(input).collect(),
        noisy: (6..12).map(input).collect(),
    };
    let objective = JointObjective {
        transition: Some(&t),
        noisy_weight: 0.7,
    };
    let count = model.param_count();
    let worst = finite_diff_check(&model, &batch, &objective, 1e-5, count, 3).unwrap();
    result(
        1,
        "gradient oracle",
        count >= 100 && worst < 1e-4,
        format!("{count} parameters, max relative error {worst:.2e} (< 1e-4)"),
    )
}

/// Criterion 2: One-hot outputs reproduce conditional frequencies; arbitrary outputs
/// give row-stochastic estimates.
pub fn estimator_exactness() -> CriterionResult {
    let mut rng = seed::stream_rng(202, 0);
    let n = 5;
    let k = 40;
    let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    let noisy: Vec<usize> = labels.iter().map(|_| rng.random_range(0..n)).collect();
    let outputs: Vec<Vec<f64>> = noisy
        .iter()
        .map(|&j| (0..n).map(|c| if c == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let est = estimate_transition(n, &labels, &outputs).unwrap();
    let mut worst_freq: f64 = 0.0;
    for i in 0..n {
        let members: Vec<usize> = (0..labels.len()).filter(|&s| labels[s] == i).collect();
        for j in 0..n {
            let freq = members.iter().filter(|&&s| noisy[s] == j).count() as f64 / members.len() as f64;
            worst_freq = worst_freq.max((est.get(i, j) - freq).abs());
        }
    }

    let mut worst_row: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let k = rng.random_range(1..6);
        let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
        let outputs: Vec<Vec<f64>> = labels
            .iter()
            .map(|_| {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let est = estimate_transition(n, &labels, &outputs).unwrap();
        for i in 0..n {
            worst_row = worst_row.max((est.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    result(
        2,
        "estimator exactness",
        worst_freq <= 1e-12 && worst_row <= 1e-9,
        format!("frequency error {worst_freq:.1e} (<= 1e-12), row-sum error {worst_row:.1e} over 1000 trials (<= 1e-9)"),
    )
}

/// Criterion 3: Monte Carlo exceedance under the concentration bound, monotone in K.
pub fn hoeffding_grid() -> CriterionResult {
    let trials = 10_000;
    let oracle = TransitionMatrix::new(
        4,
        (0..16).map(|i| if i / 4 == i % 4 { 0.55 } else { 0.15 }).collect(),
    )
    .unwrap();
    let mut ok = true;
    let mut cells = Vec::new();
    for eps in [0.05, 0.1, 0.2] {
        let mut prev: Option<f64> = None;
        for k in [5usize, 20, 100] {
            let p = mc_bound_check(&oracle, k, eps, trials, seed::derive(303, &format!("{eps}-{k}"))).unwrap();
            let bound = 2.0 * (-2.0 * eps * eps * k as f64).exp();
            let clipped = bound.min(1.0);
            let slack = 3.0 * (clipped * (1.0 - clipped) / trials as f64).sqrt();
            let formula_ok = (hoeffding_bound(eps, k) - bound).abs() <= 1e-12 * bound;
            ok &= formula_ok && p <= bound + slack;
            if let Some(q) = prev {
                let sd = ((p * (1.0 - p) + q * (1.0 - q)) / trials as f64).sqrt();
                ok &= p <= q + 3.0 * sd;
            }
            prev = Some(p);
            cells.push(format!("({eps},{k}):{p:.4}/{clipped:.4}"));
        }
    }
    result(3, "concentration bound", ok, cells.join(" "))
}

/// Criterion 4: Symmetric noise at N=10, γ=0.8 keeps 28% of labels and matches the
/// oracle matrix entrywise.
pub fn noise_fidelity() -> CriterionResult {
    let n = 10;
    let gamma = 0.8;
    let per_class = 1000;
    let mut samples: Vec<Sample> = (0..n * per_class)
        .map(|i| Sample::clean(vec![0.0], i / per_class))
        .collect();
    inject_symmetric_noise(&mut samples, n, gamma, 404).unwrap();
    let total = samples.len() as f64;
    let keep = 1.0 - (n as f64 - 1.0) * gamma / n as f64;
    let kept = samples.iter().filter(|s| s.y_star() == s.y_true()).count() as f64 / total;
    let sigma = (keep * (1.0 - keep) / total).sqrt();
    let mut ok = (kept - keep).abs() <= 3.0 * sigma;
    let empirical = true_transition_empirical(n, samples.iter().map(|s| (s.y_true(), s.y_star()))).unwrap();
    let mut worst_z: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let t = if i == j { keep } else { gamma / n as f64 };
            let sd = (t * (1.0 - t) / per_class as f64).sqrt();
            let z = (empirical.get(i, j) - t).abs() / sd;
            worst_z = worst_z.max(z);
        }
    }
    ok &= worst_z <= 3.0;
    result(
        4,
        "noise-model fidelity",
        ok,
        format!(
            "unflipped {kept:.4} vs {keep:.2} (3σ = {:.4}), worst entry {worst_z:.2}σ",
            3.0 * sigma
        ),
    )
}

/// Criterion 5: FasTEN beats vanilla cross-entropy by 5 points and keeps up with its
/// no-correction ablation.
pub fn learning_gain(lab: &Lab) -> CriterionResult {
    let fasten = lab.mean_accuracy(&Setup::new(Method::Fasten, 0.6));
    let vanilla = lab.mean_accuracy(&Setup::new(Method::VanillaCe, 0.6));
    let no_lc = lab.mean_accuracy(&Setup::new(Method::FastenNoLc, 0.6));
    let gain = fasten - vanilla;
    result(
        5,
        "learning gain",
        gain >= 0.05 && fasten >= no_lc - 0.005,
        format!(
            "fasten {} vs vanilla {} (gain {:+.2} pts, need >= 5), no-LC {}",
            pct(fasten),
            pct(vanilla),
            100.0 * gain,
            pct(no_lc)
        ),
    )
}

/// Criterion 6: Correction lowers the noise level of the training set.
pub fn cleansing(lab: &Lab) -> CriterionResult {
    let mut ok = true;
    let mut parts = Vec::new();
    for gamma in [0.4, 0.6] {
        let hs = lab.histories(&Setup::new(Method::Fasten, gamma), &SEEDS);
        for h in &hs {
            ok &= h.final_noise_level().unwrap() < h.initial_noise_level;
        }
        let init = hs.iter().map(|h| h.initial_noise_level).sum::<f64>() / hs.len() as f64;
        let fin = hs.iter().map(|h| h.final_noise_level().unwrap()).sum::<f64>() / hs.len() as f64;
        parts.push(format!("γ={gamma}: {init:.3} -> {fin:.3}"));
    }
    result(6, "cleansing", ok, format!("{} (every seed)", parts.join(", ")))
}

/// Criterion 7: Fully randomized corrections do not hurt.
pub fn miscorrection(lab: &Lab) -> CriterionResult {
    let perturbed = Setup {
        perturbation_rate: 1.0,
        ..Setup::new(Method::Fasten, 0.6)
    };
    let p = lab.mean_accuracy(&perturbed);
    let no_lc = lab.mean_accuracy(&Setup::new(Method::FastenNoLc, 0.6));
    result(
        7,
        "miscorrection robustness",
        p >= no_lc - 0.01,
        format!("perturbed fasten {} vs no-LC {} (allowed -1 pt)", pct(p), pct(no_lc)),
    )
}

/// Criterion 8: The running estimate converges and ends close to a one-shot estimate.
pub fn estimation_tracking(lab: &Lab) -> CriterionResult {
    let hs = lab.histories(&Setup::new(Method::FastenNoLc, 0.6), &SEEDS);
    let glc: Vec<f64> = parallel::map_slice(&SEEDS, |&s| {
        let run = Setup::new(Method::GlcTwoStage, 0.6).resolve(s);
        let mut prepared = prepare(&run).unwrap();
        let (_, t_glc, _) = glc_stages(&run.train, &mut prepared.splits, prepared.init.clone()).unwrap();
        let truth = true_transition_empirical(
            run.dataset.n_classes,
            prepared.splits.noisy_train.iter().map(|x| (x.y_true(), x.y_star())),
        )
        .unwrap();
        chi2_divergence(&t_glc, &truth).unwrap()
    });
    let mut ok = true;
    let mut parts = Vec::new();
    for (h, g) in hs.iter().zip(&glc) {
        let first = h.epochs[0].chi2.unwrap();
        let last = h.last().unwrap().chi2.unwrap();
        ok &= last <= 0.5 * first && last <= 2.0 * g;
        parts.push(format!("{first:.4}->{last:.4} (glc {g:.4})"));
    }
    result(8, "estimation tracking", ok, parts.join(", "))
}

/// Criterion 9: One backward pass per iteration: FasTEN iterations cost about as much
/// as vanilla ones, and a single stage beats two.
pub fn efficiency() -> CriterionResult {
    let seed = SEEDS[0];
    let timed = |method: Method| -> RunHistory {
        let run = Setup::new(method, 0.6).resolve(seed);
        let mut prepared = prepare(&run).unwrap();
        train_run(&run, &mut prepared).unwrap().history
    };
    let vanilla = timed(Method::VanillaCe);
    let fasten = timed(Method::Fasten);
    let glc = timed(Method::GlcTwoStage);
    let median = |h: &RunHistory| {
        let mut t: Vec<f64> = h.iterations.iter().map(|i| i.seconds).collect();
        t.sort_by(f64::total_cmp);
        (t[t.len() / 2], t.len())
    };
    let (mf, nf) = median(&fasten);
    let (mv, nv) = median(&vanilla);
    let ratio = mf / mv;
    let ok = nf >= 200 && nv >= 200 && ratio <= 1.5 && fasten.total_seconds() < glc.total_seconds();
    result(
        9,
        "efficiency",
        ok,
        format!(
            "median iteration {:.1}µs vs vanilla {:.1}µs (ratio {ratio:.2} <= 1.5); total {:.2}s vs GLC {:.2}s",
            mf * 1e6,
            mv * 1e6,
            fasten.total_seconds(),
            glc.total_seconds()
        ),
    )
}

/// Criterion 10: Strict runs of the same config produce identical artifacts apart from
/// timing.
pub fn determinism(scratch: &Path) -> CriterionResult {
    let config = ExperimentConfig {
        method: Method::Fasten,
        seeds: vec![3],
        out_dir: scratch.to_path_buf(),
        transition_snapshots: true,
        write_dataset: true,
        dataset: DatasetConfig {
            n_per_class: 300,
            ..DatasetConfig::default()
        },
        noise: NoiseConfig {
            kind: NoiseKind::Symmetric,
            gamma: 0.5,
            pairing: None,
        },
        train: TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        },
        sweep: None,
    };
    let opts = RunOptions {
        strict: true,
        ..RunOptions::default()
    };
    let was_strict = parallel::is_strict();
    let a = runner::execute(&config, &opts);
    let b = runner::execute(&config, &opts);
    parallel::set_strict(was_strict);
    let (Ok(Some(a)), Ok(Some(b))) = (a, b) else {
        return result(10, "determinism", false, "run failed".into());
    };
    let compare = |rel: &str| -> bool {
        let read = |d: &Path| std::fs::read_to_string(d.join(rel)).unwrap_or_default();
        let (x, y) = (read(&a.dir), read(&b.dir));
        if rel.ends_with("summary.json") {
            summary::without_timing(&x).ok() == summary::without_timing(&y).ok() && !x.is_empty()
        } else if rel.ends_with("history.csv") {
            summary::history_without_timing(&x) == summary::history_without_timing(&y) && !x.is_empty()
        } else {
            x == y && !x.is_empty()
        }
    };
    let files = [
        "fasten/seed-3/history.csv",
        "fasten/seed-3/summary.json",
        "fasten/seed-3/noisy_train.csv",
        "fasten/seed-3/transition/epoch-003.csv",
        "aggregate.json",
    ];
    let same: Vec<bool> = files.iter().map(|f| compare(f)).collect();
    let _ = std::fs::remove_dir_all(&a.dir);
    let _ = std::fs::remove_dir_all(&b.dir);
    result(
        10,
        "determinism",
        same.iter().all(|s| *s),
        format!("{}/{} artifacts identical under --strict", same.iter().filter(|s| **s).count(), files.len()),
    )
}

/// Criterion 11: AUROC matches its pairwise definition; a random scorer's AUPRC sits
/// at the positive rate.
pub fn metric_oracles() -> CriterionResult {
    let mut rng = seed::stream_rng(1111, 0);
    let mut exact = true;
    for trial in 0..50 {
        let n = 2 + trial * 4;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 10.0).floor() / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        exact &= auroc(&scores, &labels).unwrap() == wins / pairs;
    }
    let n = 1000;
    let mut labels: Vec<bool> = (0..n).map(|i| i < 720).collect();
    labels.shuffle(&mut rng);
    let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let prevalence = 0.72;
    let ap = auprc(&scores, &labels).unwrap();
    let sigma = (prevalence * (1.0 - prevalence) / n as f64).sqrt();
    let close = (ap - prevalence).abs() <= 3.0 * sigma;
    result(
        11,
        "metric oracles",
        exact && close,
        format!(
            "AUROC exact on 50 sets: {exact}; random AUPRC {ap:.4} vs {prevalence} (3σ = {:.4})",
            3.0 * sigma
        ),
    )
}

/// Criterion 12: Few clean samples per class suffice.
pub fn k_insensitivity(lab: &Lab) -> CriterionResult {
    let small = lab.mean_accuracy(&Setup {
        k: 2,
        ..Setup::new(Method::Fasten, 0.4)
    });
    let large = lab.mean_accuracy(&Setup::new(Method::Fasten, 0.4));
    let diff = (small - large).abs();
    result(
        12,
        "K-insensitivity",
        diff <= 0.03,
        format!("K=2 {} vs K=10 {} (|diff| {:.2} pts <= 3)", pct(small), pct(large), 100.0 * diff),
    )
}

/// Run every criterion in order. Timing runs go first so that nothing
/// competes with them for cores.
pub fn run_all(scratch: &Path, mut report: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let efficiency = efficiency();
    let lab = Lab::new();
    let mut out = Vec::new();
    let mut push = |r: CriterionResult| {
        report(&r);
        out.push(r);
    };
    push(gradient_oracle());
    push(estimator_exactness());
    push(hoeffding_grid());
    push(noise_fidelity());
    push(learning_gain(&lab));
    push(cleansing(&lab));
    push(miscorrection(&lab));
    push(estimation_tracking(&lab));
    push(efficiency);
    push(determinism(scratch));
    push(metric_oracles());
    push(k_insensitivity(&lab));
    out
}
