//! The training loop: per iteration, estimate the transition matrix from
//! the clean batch, build the joint objective, take one backward pass and one
//! SGD step, and correct the labels of the noisy batch.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{noise_level, CleanSampler, DatasetSplits, NoisySampler, Sample};
use crate::error::{Error, Result};
use crate::metrics::test_accuracy;
use crate::nn::{
    self, argmax, backward_from, forward_batch, JointBatch, JointObjective, LabeledInput, ModelParams,
    Sgd,
};
use crate::parallel;
use crate::seed;
use crate::transition::{
    chi2_divergence, estimate_transition, mean_diagonal, true_transition_empirical, TransitionMatrix,
};

/// When label correction runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionCadence {
    /// On each noisy batch, right after its forward pass.
    #[default]
    PerIteration,
    /// Over the whole noisy set once an epoch has finished.
    EndOfEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Label-correction confidence threshold.
    pub rho: f64,
    /// Weight of the noisy-head loss.
    pub lambda: f64,
    /// Clean samples per class in each batch; the noisy batch holds `K·N`.
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at whose start the learning rate is multiplied by
    /// `decay_factor`. Empty means 70% and 85% of `epochs`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub correction_enabled: bool,
    pub correction_cadence: CorrectionCadence,
    /// Probability of replacing a corrected label with a random other class.
    pub perturbation_rate: f64,
    /// Set per run by the caller, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rho: 0.9,
            lambda: 0.5,
            k: 10,
            epochs: 30,
            lr: 0.001,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            momentum: 0.9,
            hidden: vec![64, 64],
            correction_enabled: true,
            correction_cadence: CorrectionCadence::PerIteration,
            perturbation_rate: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.issues().into_iter().next() {
            Some((field, message)) => Err(Error::Config(format!("{field}: {message}"))),
            None => Ok(()),
        }
    }

    /// Every invalid field with the reason, in declaration order.
    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut bad = |field: &'static str, ok: bool, message: String| {
            if !ok {
                out.push((field, message));
            }
        };
        bad("rho", self.rho > 0.0 && self.rho <= 1.0, format!("must lie in (0,1], got {}", self.rho));
        bad(
            "lambda",
            self.lambda >= 0.0 && self.lambda.is_finite(),
            format!("must be nonnegative, got {}", self.lambda),
        );
        bad("k", self.k > 0, "must be at least 1".into());
        bad("epochs", self.epochs > 0, "must be at least 1".into());
        bad(
            "lr",
            self.lr > 0.0 && self.lr.is_finite(),
            format!("must be positive, got {}", self.lr),
        );
        let decay = self.resolved_decay_epochs();
        bad(
            "decay_epochs",
            decay.windows(2).all(|w| w[0] < w[1]) && decay.iter().all(|&e| e < self.epochs),
            format!("{decay:?} must be strictly increasing and below {}", self.epochs),
        );
        bad(
            "decay_factor",
            self.decay_factor > 0.0 && self.decay_factor.is_finite(),
            format!("must be positive, got {}", self.decay_factor),
        );
        bad(
            "momentum",
            (0.0..1.0).contains(&self.momentum),
            format!("must lie in [0,1), got {}", self.momentum),
        );
        bad(
            "hidden",
            !self.hidden.is_empty() && !self.hidden.contains(&0),
            "widths must be nonempty and positive".into(),
        );
        bad(
            "perturbation_rate",
            (0.0..=1.0).contains(&self.perturbation_rate),
            format!("must lie in [0,1], got {}", self.perturbation_rate),
        );
        out
    }

    pub fn resolved_decay_epochs(&self) -> Vec<usize> {
        if !self.decay_epochs.is_empty() {
            return self.decay_epochs.clone();
        }
        let mut out: Vec<usize> = [0.70, 0.85]
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .filter(|&e| e > 0 && e < self.epochs)
            .collect();
        out.dedup();
        out
    }

    /// Learning rate in effect during (0-based) epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self
            .resolved_decay_epochs()
            .iter()
            .filter(|&&e| e <= epoch)
            .count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

/// Every training procedure in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fasten,
    FastenNoLc,
    VanillaCe,
    NaiveOversampling,
    GlcTwoStage,
    OracleT,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fasten,
        Method::FastenNoLc,
        Method::VanillaCe,
        Method::NaiveOversampling,
        Method::GlcTwoStage,
        Method::OracleT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fasten => "fasten",
            Method::FastenNoLc => "fasten_no_lc",
            Method::VanillaCe => "vanilla_ce",
            Method::NaiveOversampling => "naive_oversampling",
            Method::GlcTwoStage => "glc_two_stage",
            Method::OracleT => "oracle_t",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Where the matrix in the corrected loss comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum TransitionSource {
    /// Re-estimated every iteration from the noisy head on the clean batch.
    Estimated,
    /// Held constant for the whole run.
    Fixed(TransitionMatrix),
}

/// The switches that distinguish the batch-formation procedures.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopSpec {
    pub method: Method,
    pub transition: TransitionSource,
    pub noisy_weight: f64,
    pub correction: bool,
}

impl LoopSpec {
    pub fn fasten(config: &TrainConfig) -> Self {
        LoopSpec {
            method: if config.correction_enabled {
                Method::Fasten
            } else {
                Method::FastenNoLc
            },
            transition: TransitionSource::Estimated,
            noisy_weight: config.lambda,
            correction: config.correction_enabled,
        }
    }

    fn needs_noisy_head(&self) -> bool {
        self.noisy_weight != 0.0 || self.transition == TransitionSource::Estimated
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub clean_loss: f64,
    pub noisy_loss: f64,
    pub total_loss: f64,
    pub corrected: usize,
    pub reverted: usize,
    pub perturbed: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Clean-head accuracy on the noisy training set, against latent classes.
    pub train_acc: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
    pub noise_level: f64,
    /// χ² of the epoch-mean matrix against the empirical true transition.
    pub chi2: Option<f64>,
    pub mean_diag_hat: Option<f64>,
    pub mean_diag_true: f64,
    /// Labels changed by correction so far, summed over iterations.
    pub corrections: usize,
    pub epoch_seconds: f64,
    pub transition_hat: Option<TransitionMatrix>,
    pub transition_true: TransitionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub method: Method,
    pub initial_noise_level: f64,
    pub epochs: Vec<EpochRecord>,
    pub iterations: Vec<IterationRecord>,
    /// Epoch with the best validation accuracy (earliest on ties).
    pub best_epoch: Option<usize>,
    /// Training time of preceding stages (GLC's first stage).
    pub extra_stage_seconds: f64,
}

impl RunHistory {
    fn new(method: Method, initial_noise_level: f64) -> Self {
        RunHistory {
            method,
            initial_noise_level,
            epochs: Vec::new(),
            iterations: Vec::new(),
            best_epoch: None,
            extra_stage_seconds: 0.0,
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.get(e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Test accuracy of the selected model.
    pub fn selected_test_accuracy(&self) -> Option<f64> {
        self.best().map(|e| e.test_acc)
    }

    pub fn final_noise_level(&self) -> Option<f64> {
        self.last().map(|e| e.noise_level)
    }

    /// Training wall time: all stages, excluding evaluation.
    pub fn total_seconds(&self) -> f64 {
        self.extra_stage_seconds + self.epochs.iter().map(|e| e.epoch_seconds).sum::<f64>()
    }

    pub fn median_iteration_seconds(&self) -> Option<f64> {
        let mut t: Vec<f64> = self.iterations.iter().map(|i| i.seconds).collect();
        if t.is_empty() {
            return None;
        }
        t.sort_by(f64::total_cmp);
        Some(t[t.len() / 2])
    }

    /// History CSV: one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,train_acc,valid_acc,test_acc,noise_level,chi2,mean_diag_hat,mean_diag_true,corrections,epoch_seconds\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.train_acc,
                e.valid_acc,
                e.test_acc,
                e.noise_level,
                opt(e.chi2),
                opt(e.mean_diag_hat),
                e.mean_diag_true,
                e.corrections,
                e.epoch_seconds
            ));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// Parameters at the best validation epoch.
    pub best: ModelParams,
    pub last: ModelParams,
    pub history: RunHistory,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    /// Training stopped midway; the history up to the failure is kept.
    #[error("training aborted: {error}")]
    Aborted { error: Error, history: Box<RunHistory> },
}

impl TrainError {
    pub fn partial_history(&self) -> Option<&RunHistory> {
        match self {
            TrainError::Aborted { history, .. } => Some(history),
            TrainError::Setup(_) => None,
        }
    }
}

/// Result of one label-correction pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrectionOutcome {
    /// Labels moved to the clean head's argmax.
    pub corrected: usize,
    /// Labels moved back to the delivered label.
    pub reverted: usize,
    /// Samples now labelled with an argmax that differs from the delivered label.
    pub relabeled: Vec<usize>,
}

/// Confident samples take the clean head's argmax (lowest index on ties);
/// the rest fall back to their delivered label.
pub fn correct_labels<P: AsRef<[f64]>>(
    samples: &mut [Sample],
    indices: &[usize],
    clean_probs: &[P],
    rho: f64,
) -> Result<CorrectionOutcome> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho must lie in (0,1], got {rho}")));
    }
    if indices.len() != clean_probs.len() {
        return Err(Error::Dimension {
            context: "correction outputs",
            expected: indices.len(),
            actual: clean_probs.len(),
        });
    }
    let mut out = CorrectionOutcome::default();
    for (&idx, p) in indices.iter().zip(clean_probs) {
        let p = p.as_ref();
        let s = &mut samples[idx];
        let best = argmax(p);
        let previous = s.y_current();
        if p[best] < rho {
            if previous != s.y_star() {
                out.reverted += 1;
            }
            s.set_current(s.y_star());
        } else {
            if previous != best {
                out.corrected += 1;
            }
            s.set_current(best);
            if best != s.y_star() {
                out.relabeled.push(idx);
            }
        }
    }
    Ok(out)
}

/// With probability `rate`, move each listed label to a uniformly chosen
/// different class. Returns how many were moved.
pub fn perturb_corrections<R: Rng>(
    samples: &mut [Sample],
    indices: &[usize],
    n_classes: usize,
    rate: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("perturbation rate must lie in [0,1], got {rate}")));
    }
    if rate == 0.0 || n_classes < 2 {
        return Ok(0);
    }
    let mut moved = 0;
    for &idx in indices {
        if rng.random::<f64>() < rate {
            let current = samples[idx].y_current();
            let mut c = rng.random_range(0..n_classes - 1);
            if c >= current {
                c += 1;
            }
            samples[idx].set_current(c);
            moved += 1;
        }
    }
    Ok(moved)
}

/// Transition-corrected clean-classifier loss on a clean and a noisy batch.
pub fn compute_clean_loss(
    model: &ModelParams,
    transition: &TransitionMatrix,
    batch: &JointBatch<'_>,
) -> Result<f64> {
    let obj = JointObjective {
        transition: Some(transition),
        noisy_weight: 0.0,
    };
    Ok(nn::joint_loss(model, batch, &obj)?.clean_loss())
}

/// Noisy-head loss on the noisy batch.
pub fn compute_noisy_loss(model: &ModelParams, noisy: &[LabeledInput<'_>]) -> Result<f64> {
    let batch = JointBatch {
        clean: Vec::new(),
        noisy: noisy.to_vec(),
    };
    let obj = JointObjective {
        transition: None,
        noisy_weight: 1.0,
    };
    Ok(nn::joint_loss(model, &batch, &obj)?.noisy_head)
}

/// Accuracies and label statistics shared by every procedure.
pub(crate) struct EpochEval {
    pub train_acc: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
    pub noise_level: f64,
    pub transition_true: TransitionMatrix,
}

pub(crate) fn evaluate(model: &ModelParams, splits: &DatasetSplits) -> Result<EpochEval> {
    let transition_true = true_transition_empirical(
        splits.n_classes(),
        splits.noisy_train.iter().map(|s| (s.y_true(), s.y_current())),
    )?;
    Ok(EpochEval {
        train_acc: test_accuracy(model, &splits.noisy_train)?,
        valid_acc: test_accuracy(model, &splits.valid)?,
        test_acc: test_accuracy(model, &splits.test)?,
        noise_level: noise_level(&splits.noisy_train),
        transition_true,
    })
}

/// Best-validation bookkeeping common to all loops.
pub(crate) struct Selection {
    best_valid: f64,
    pub best: Option<ModelParams>,
}

impl Selection {
    pub fn new() -> Self {
        Selection {
            best_valid: f64::NEG_INFINITY,
            best: None,
        }
    }

    pub fn offer(&mut self, history: &mut RunHistory, epoch: usize, valid: f64, model: &ModelParams) {
        if valid > self.best_valid {
            self.best_valid = valid;
            self.best = Some(model.clone());
            history.best_epoch = Some(epoch);
        }
    }
}

fn clean_only_forward(model: &ModelParams, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    crate::metrics::head_probabilities(model, samples, crate::metrics::ScoringHead::Clean)
}

/// Run the FasTEN procedure (or its no-correction ablation when
/// `config.correction_enabled` is false).
pub fn train(config: &TrainConfig, splits: &mut DatasetSplits, init: ModelParams) -> std::result::Result<TrainedModel, TrainError> {
    let spec = LoopSpec::fasten(config);
    run_loop(config, splits, init, &spec)
}

/// The two-batch loop behind FasTEN and its batch-formation relatives.
pub fn run_loop(
    config: &TrainConfig,
    splits: &mut DatasetSplits,
    init: ModelParams,
    spec: &LoopSpec,
) -> std::result::Result<TrainedModel, TrainError> {
    config.validate()?;
    let n = splits.n_classes();
    if init.n_classes() != n || init.input_dim() != splits.input_dim() {
        return Err(Error::Config("model shape does not match the dataset".into()).into());
    }
    if let TransitionSource::Fixed(t) = &spec.transition {
        if t.n_classes() != n {
            return Err(Error::Config("fixed transition matrix has the wrong size".into()).into());
        }
    }
    let mut clean_sampler = CleanSampler::new(&splits.clean_train, n, config.k, config.seed)?;
    let mut noisy_sampler = NoisySampler::new(splits.noisy_train.len(), config.k * n, config.seed)?;
    let mut perturb_rng: ChaCha8Rng = seed::stream_rng(seed::derive(config.seed, "perturb"), 0);
    let mut opt = Sgd::new(config.lr, config.momentum)?;
    let mut model = init;
    let mut history = RunHistory::new(spec.method, noise_level(&splits.noisy_train));
    let mut selection = Selection::new();
    let mut cumulative_corrections = 0usize;
    let mut iteration = 0usize;
    let with_noisy_head = spec.needs_noisy_head();

    for epoch in 0..config.epochs {
        opt.set_lr(config.lr_at(epoch));
        let mut epoch_seconds = 0.0;
        let mut hat_sum: Option<Vec<f64>> = None;
        let mut hat_count = 0usize;

        for noisy_idx in noisy_sampler.next_epoch() {
            let clean_idx = clean_sampler.next_batch();
            let started = Instant::now();
            let step = (|| -> Result<(nn::LossBreakdown, CorrectionOutcome, usize, TransitionMatrix)> {
                let batch = JointBatch {
                    clean: clean_idx
                        .iter()
                        .map(|&i| LabeledInput {
                            x: splits.clean_train[i].x(),
                            label: splits.clean_train[i].y_current(),
                        })
                        .collect(),
                    noisy: noisy_idx
                        .iter()
                        .map(|&i| LabeledInput {
                            x: splits.noisy_train[i].x(),
                            label: splits.noisy_train[i].y_current(),
                        })
                        .collect(),
                };
                let forward = forward_batch(&model, &batch, with_noisy_head)?;
                let t_hat = match &spec.transition {
                    TransitionSource::Estimated => {
                        let labels: Vec<usize> = batch.clean.iter().map(|s| s.label).collect();
                        let outputs = forward
                            .noisy_head_on_clean()
                            .expect("noisy head evaluated for estimation");
                        estimate_transition(n, &labels, &outputs)?
                    }
                    TransitionSource::Fixed(t) => t.clone(),
                };
                let objective = JointObjective {
                    transition: Some(&t_hat),
                    noisy_weight: spec.noisy_weight,
                };
                let (loss, grads) = backward_from(&model, &batch, &forward, &objective)?;
                let mut outcome = CorrectionOutcome::default();
                let mut perturbed = 0;
                if spec.correction && config.correction_cadence == CorrectionCadence::PerIteration {
                    let probs = forward.clean_head_on_noisy();
                    drop(batch);
                    outcome = correct_labels(&mut splits.noisy_train, &noisy_idx, &probs, config.rho)?;
                    perturbed = perturb_corrections(
                        &mut splits.noisy_train,
                        &outcome.relabeled,
                        n,
                        config.perturbation_rate,
                        &mut perturb_rng,
                    )?;
                }
                opt.step(&mut model, &grads);
                Ok((loss, outcome, perturbed, t_hat))
            })();
            let seconds = started.elapsed().as_secs_f64();
            let (loss, outcome, perturbed, t_hat) = match step {
                Ok(v) => v,
                Err(error) => {
                    return Err(TrainError::Aborted {
                        error,
                        history: Box::new(history),
                    })
                }
            };
            epoch_seconds += seconds;
            cumulative_corrections += outcome.corrected;
            if spec.transition == TransitionSource::Estimated {
                let acc = hat_sum.get_or_insert_with(|| vec![0.0; n * n]);
                acc.iter_mut().zip(t_hat.entries()).for_each(|(a, v)| *a += v);
                hat_count += 1;
            }
            history.iterations.push(IterationRecord {
                iteration,
                epoch,
                clean_loss: loss.clean_loss(),
                noisy_loss: loss.noisy_head,
                total_loss: loss.total,
                corrected: outcome.corrected,
                reverted: outcome.reverted,
                perturbed,
                seconds,
            });
            iteration += 1;
        }

        if spec.correction && config.correction_cadence == CorrectionCadence::EndOfEpoch {
            let started = Instant::now();
            let result = (|| -> Result<CorrectionOutcome> {
                let probs = clean_only_forward(&model, &splits.noisy_train)?;
                let all: Vec<usize> = (0..splits.noisy_train.len()).collect();
                let outcome = correct_labels(&mut splits.noisy_train, &all, &probs, config.rho)?;
                perturb_corrections(
                    &mut splits.noisy_train,
                    &outcome.relabeled,
                    n,
                    config.perturbation_rate,
                    &mut perturb_rng,
                )?;
                Ok(outcome)
            })();
            match result {
                Ok(outcome) => cumulative_corrections += outcome.corrected,
                Err(error) => {
                    return Err(TrainError::Aborted {
                        error,
                        history: Box::new(history),
                    })
                }
            }
            epoch_seconds += started.elapsed().as_secs_f64();
        }

        let transition_hat = match (&spec.transition, hat_sum) {
            (TransitionSource::Estimated, Some(sum)) => {
                let mean: Vec<f64> = sum.into_iter().map(|v| v / hat_count as f64).collect();
                Some(renormalize(n, mean))
            }
            (TransitionSource::Fixed(t), _) => Some(t.clone()),
            _ => None,
        };
        let eval = match evaluate(&model, splits) {
            Ok(e) => e,
            Err(error) => {
                return Err(TrainError::Aborted {
                    error,
                    history: Box::new(history),
                })
            }
        };
        push_epoch(
            &mut history,
            &mut selection,
            &model,
            epoch,
            opt.lr(),
            eval,
            transition_hat,
            cumulative_corrections,
            epoch_seconds,
        );
    }

    Ok(TrainedModel {
        best: selection.best.unwrap_or_else(|| model.clone()),
        last: model,
        history,
    })
}

/// Clamp tiny rounding drift in an averaged row-stochastic matrix.
fn renormalize(n: usize, mut entries: Vec<f64>) -> TransitionMatrix {
    for row in entries.chunks_exact_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    TransitionMatrix::new(n, entries).expect("average of row-stochastic matrices")
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn push_epoch(
    history: &mut RunHistory,
    selection: &mut Selection,
    model: &ModelParams,
    epoch: usize,
    lr: f64,
    eval: EpochEval,
    transition_hat: Option<TransitionMatrix>,
    corrections: usize,
    epoch_seconds: f64,
) {
    let chi2 = transition_hat
        .as_ref()
        .map(|t| chi2_divergence(t, &eval.transition_true).expect("matching sizes"));
    history.epochs.push(EpochRecord {
        epoch,
        lr,
        train_acc: eval.train_acc,
        valid_acc: eval.valid_acc,
        test_acc: eval.test_acc,
        noise_level: eval.noise_level,
        chi2,
        mean_diag_hat: transition_hat.as_ref().map(mean_diagonal),
        mean_diag_true: mean_diagonal(&eval.transition_true),
        corrections,
        epoch_seconds,
        transition_hat,
        transition_true: eval.transition_true,
    });
    selection.offer(history, epoch, eval.valid_acc, model);
}

/// Single-head cross-entropy steps over a pool of samples with their live
/// labels, in shuffled batches of `batch_size`. Used by the vanilla baseline
/// and by the first stage of GLC.
pub(crate) fn single_head_epoch(
    model: &mut ModelParams,
    opt: &mut Sgd,
    pool: &[(&[f64], usize)],
    batch_size: usize,
    epoch_seed: u64,
    mut on_iteration: impl FnMut(f64, f64),
) -> Result<f64> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seed::stream_rng(epoch_seed, 0));
    let objective = JointObjective {
        transition: None,
        noisy_weight: 0.0,
    };
    let mut seconds = 0.0;
    for chunk in order.chunks(batch_size) {
        let started = Instant::now();
        let batch = JointBatch {
            clean: chunk
                .iter()
                .map(|&i| LabeledInput {
                    x: pool[i].0,
                    label: pool[i].1,
                })
                .collect(),
            noisy: Vec::new(),
        };
        let forward = forward_batch(model, &batch, false)?;
        let (loss, grads) = backward_from(model, &batch, &forward, &objective)?;
        opt.step(model, &grads);
        let dt = started.elapsed().as_secs_f64();
        seconds += dt;
        on_iteration(loss.total, dt);
    }
    Ok(seconds)
}

/// Whether rayon is active for this process.
pub fn parallel_enabled() -> bool {
    parallel::enabled()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, split, BlobSpec, NoiseKind, NoiseSpec, SplitFractions};
    use crate::nn::ProbVector;

    fn samples(labels: &[(usize, usize)]) -> Vec<Sample> {
        labels
            .iter()
            .map(|&(t, s)| Sample::with_labels(vec![0.0], t, s, s))
            .collect()
    }

    #[test]
    fn uniform_outputs_revert_everything() {
        let mut set = samples(&[(0, 1), (1, 2), (2, 0)]);
        for s in &mut set {
            s.set_current(s.y_true());
        }
        let probs = vec![ProbVector::uniform(3).into_vec(); 3];
        let out = correct_labels(&mut set, &[0, 1, 2], &probs, 0.5).unwrap();
        assert_eq!(out.reverted, 3);
        assert!(set.iter().all(|s| s.y_current() == s.y_star()));
    }

    #[test]
    fn confident_output_relabels() {
        let mut set = samples(&[(0, 2)]);
        let out = correct_labels(&mut set, &[0], &[[0.96, 0.02, 0.02]], 0.9).unwrap();
        assert_eq!(set[0].y_current(), 0);
        assert_eq!(out.corrected, 1);
        assert_eq!(out.relabeled, vec![0]);
    }

    #[test]
    fn tiny_threshold_relabels_all_and_ties_pick_lowest() {
        let mut set = samples(&[(0, 2), (1, 1), (2, 0)]);
        let probs = [[0.4, 0.4, 0.2], [0.1, 0.3, 0.6], [0.2, 0.5, 0.3]];
        correct_labels(&mut set, &[0, 1, 2], &probs, 1e-9).unwrap();
        let labels: Vec<usize> = set.iter().map(|s| s.y_current()).collect();
        assert_eq!(labels, vec![0, 2, 1]);
        assert!(correct_labels(&mut set, &[0], &[[1.0, 0.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn perturbation_rates() {
        let mut rng = seed::stream_rng(1, 0);
        let mut set = samples(&[(0, 0); 2000]);
        let idx: Vec<usize> = (0..2000).collect();
        assert_eq!(perturb_corrections(&mut set, &idx, 4, 0.0, &mut rng).unwrap(), 0);
        assert!(set.iter().all(|s| s.y_current() == 0));
        let moved = perturb_corrections(&mut set, &idx, 4, 1.0, &mut rng).unwrap();
        assert_eq!(moved, 2000);
        assert!(set.iter().all(|s| s.y_current() != 0));
        let mut set = samples(&[(0, 0); 2000]);
        let moved = perturb_corrections(&mut set, &idx, 4, 0.5, &mut rng).unwrap();
        let sigma3 = 3.0 * (0.25f64 / 2000.0).sqrt();
        assert!((moved as f64 / 2000.0 - 0.5).abs() <= sigma3, "{moved}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig { decay_epochs: vec![20, 10], ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c.decay_epochs = vec![10, 30];
        assert!(c.validate().is_err());
        let c = TrainConfig {
            rho: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig {
            epochs: 20,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(c.resolved_decay_epochs(), vec![14, 17]);
        assert_eq!(c.lr_at(13), 1.0);
        assert!((c.lr_at(14) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(19) - 0.01).abs() < 1e-15);
    }

    pub(crate) fn small_splits(gamma: f64, seed: u64) -> DatasetSplits {
        let blobs = generate_blobs(&BlobSpec {
            n_classes: 3,
            n_per_class: 200,
            dim: 6,
            spread: 0.3,
            seed,
        })
        .unwrap();
        let mut s = split(
            blobs,
            3,
            SplitFractions {
                noisy_train: 0.7,
                clean_train: 0.1,
                valid: 0.1,
                test: 0.1,
            },
            seed,
            4,
        )
        .unwrap();
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
            k: 4,
            epochs: 4,
            hidden: vec![16],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn disabled_correction_keeps_delivered_labels() {
        let mut splits = small_splits(0.5, 1);
        let cfg = TrainConfig {
            correction_enabled: false,
            ..small_config()
        };
        let init = ModelParams::init(6, &cfg.hidden, 3, 1).unwrap();
        let out = train(&cfg, &mut splits, init).unwrap();
        assert!(splits.noisy_train.iter().all(|s| s.y_current() == s.y_star()));
        assert_eq!(out.history.epochs.len(), 4);
        assert_eq!(out.history.method, Method::FastenNoLc);
        let first = &out.history.epochs[0].transition_true;
        assert!(out.history.epochs.iter().all(|e| &e.transition_true == first));
    }

    #[test]
    fn zero_lambda_freezes_noisy_head() {
        let mut splits = small_splits(0.3, 2);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..small_config()
        };
        let init = ModelParams::init(6, &cfg.hidden, 3, 2).unwrap();
        let head = init.noisy_head.clone();
        let clean = init.clean_head.clone();
        let out = train(&cfg, &mut splits, init).unwrap();
        assert_eq!(out.last.noisy_head, head);
        assert_ne!(out.last.clean_head, clean);
    }

    #[test]
    fn after_correction_labels_are_valid() {
        let mut splits = small_splits(0.5, 3);
        let cfg = small_config();
        let init = ModelParams::init(6, &cfg.hidden, 3, 3).unwrap();
        let out = train(&cfg, &mut splits, init).unwrap();
        assert!(splits.noisy_train.iter().all(|s| s.y_current() < 3 && s.y_star() < 3));
        let iters = out.history.iterations.len();
        assert_eq!(iters, 4 * splits.noisy_train.len().div_ceil(12));
        assert!(out.history.iterations.iter().all(|r| r.corrected + r.reverted <= 12));
    }

    #[test]
    fn run_is_bitwise_reproducible() {
        let cfg = TrainConfig {
            correction_enabled: false,
            ..small_config()
        };
        let run = || {
            let mut splits = small_splits(0.4, 5);
            let init = ModelParams::init(6, &cfg.hidden, 3, 5).unwrap();
            let out = train(&cfg, &mut splits, init).unwrap();
            (out.last, out.history.epochs.iter().map(|e| (e.test_acc, e.chi2)).collect::<Vec<_>>())
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }
}
