//! Reference procedures. Every one consumes the same [`DatasetSplits`] and
//! is evaluated by the same code as FasTEN; only the loop differs.

use serde::{Deserialize, Serialize};

use crate::data::{noise_level, DatasetSplits, Sample};
use crate::error::{Error, Result};
use crate::metrics::{head_probabilities, ScoringHead};
use crate::nn::{ModelParams, Sgd};
use crate::seed;
use crate::train::{
    self, evaluate, push_epoch, run_loop, single_head_epoch, IterationRecord, LoopSpec, Method,
    RunHistory, Selection, TrainConfig, TrainError, TrainedModel, TransitionSource,
};
use crate::transition::{estimate_transition, TransitionMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    VanillaCe,
    NaiveOversampling,
    GlcTwoStage,
    OracleT,
    FastenNoLc,
}

impl From<BaselineKind> for Method {
    fn from(kind: BaselineKind) -> Method {
        match kind {
            BaselineKind::VanillaCe => Method::VanillaCe,
            BaselineKind::NaiveOversampling => Method::NaiveOversampling,
            BaselineKind::GlcTwoStage => Method::GlcTwoStage,
            BaselineKind::OracleT => Method::OracleT,
            BaselineKind::FastenNoLc => Method::FastenNoLc,
        }
    }
}

type TrainResult = std::result::Result<TrainedModel, TrainError>;

/// Dispatch any method. `oracle` is required for [`Method::OracleT`].
pub fn train_method(
    method: Method,
    config: &TrainConfig,
    splits: &mut DatasetSplits,
    init: ModelParams,
    oracle: Option<&TransitionMatrix>,
) -> TrainResult {
    match method {
        Method::Fasten => train::train(config, splits, init),
        Method::FastenNoLc => train_fasten_no_lc(config, splits, init),
        Method::VanillaCe => train_vanilla(config, splits, init),
        Method::NaiveOversampling => train_naive_oversampling(config, splits, init),
        Method::GlcTwoStage => train_glc_two_stage(config, splits, init),
        Method::OracleT => {
            let t = oracle.ok_or_else(|| Error::Config("oracle_t needs the injection matrix".into()))?;
            train_oracle_t(config, splits, init, t.clone())
        }
    }
}

pub fn train_fasten_no_lc(config: &TrainConfig, splits: &mut DatasetSplits, init: ModelParams) -> TrainResult {
    let cfg = TrainConfig {
        correction_enabled: false,
        ..config.clone()
    };
    run_loop(&cfg, splits, init, &fasten_no_lc_spec(config))
}

pub fn fasten_no_lc_spec(config: &TrainConfig) -> LoopSpec {
    LoopSpec {
        method: Method::FastenNoLc,
        transition: TransitionSource::Estimated,
        noisy_weight: config.lambda,
        correction: false,
    }
}

/// Balanced two-batch formation with plain cross-entropy on both batches.
pub fn naive_oversampling_spec(n_classes: usize) -> LoopSpec {
    LoopSpec {
        method: Method::NaiveOversampling,
        transition: TransitionSource::Fixed(TransitionMatrix::identity(n_classes)),
        noisy_weight: 0.0,
        correction: false,
    }
}

pub fn oracle_t_spec(oracle: TransitionMatrix) -> LoopSpec {
    LoopSpec {
        method: Method::OracleT,
        transition: TransitionSource::Fixed(oracle),
        noisy_weight: 0.0,
        correction: false,
    }
}

pub fn train_naive_oversampling(config: &TrainConfig, splits: &mut DatasetSplits, init: ModelParams) -> TrainResult {
    let spec = naive_oversampling_spec(splits.n_classes());
    run_loop(config, splits, init, &spec)
}

pub fn train_oracle_t(
    config: &TrainConfig,
    splits: &mut DatasetSplits,
    init: ModelParams,
    oracle: TransitionMatrix,
) -> TrainResult {
    run_loop(config, splits, init, &oracle_t_spec(oracle))
}

/// Single-head cross-entropy on `noisy_train ∪ clean_train`, shuffled,
/// batches of `2·K·N`.
pub fn train_vanilla(config: &TrainConfig, splits: &mut DatasetSplits, init: ModelParams) -> TrainResult {
    let pool: Vec<(Vec<f64>, usize)> = splits
        .noisy_train
        .iter()
        .chain(&splits.clean_train)
        .map(|x| (x.x().to_vec(), x.y_current()))
        .collect();
    single_head_loop(config, splits, init, &pool, Method::VanillaCe)
        .map(|(trained, _)| trained)
}

fn single_head_loop(
    config: &TrainConfig,
    splits: &DatasetSplits,
    init: ModelParams,
    pool: &[(Vec<f64>, usize)],
    method: Method,
) -> std::result::Result<(TrainedModel, f64), TrainError> {
    config.validate()?;
    let n = splits.n_classes();
    if init.n_classes() != n || init.input_dim() != splits.input_dim() {
        return Err(Error::Config("model shape does not match the dataset".into()).into());
    }
    let pool: Vec<(&[f64], usize)> = pool.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let batch_size = 2 * config.k * n;
    let mut opt = Sgd::new(config.lr, config.momentum)?;
    let mut model = init;
    let mut history = RunHistory {
        method,
        initial_noise_level: noise_level(&splits.noisy_train),
        epochs: Vec::new(),
        iterations: Vec::new(),
        best_epoch: None,
        extra_stage_seconds: 0.0,
    };
    let mut selection = Selection::new();
    let mut iteration = 0;
    let mut total = 0.0;
    let order_seed = seed::derive(config.seed, "single-head-order");
    for epoch in 0..config.epochs {
        opt.set_lr(config.lr_at(epoch));
        let iterations = &mut history.iterations;
        let seconds = single_head_epoch(
            &mut model,
            &mut opt,
            &pool,
            batch_size,
            seed::derive(order_seed, &epoch.to_string()),
            |loss, dt| {
                iterations.push(IterationRecord {
                    iteration,
                    epoch,
                    clean_loss: loss,
                    noisy_loss: 0.0,
                    total_loss: loss,
                    corrected: 0,
                    reverted: 0,
                    perturbed: 0,
                    seconds: dt,
                });
                iteration += 1;
            },
        );
        let seconds = match seconds.and_then(|s| evaluate(&model, splits).map(|e| (s, e))) {
            Ok((s, eval)) => {
                push_epoch(&mut history, &mut selection, &model, epoch, opt.lr(), eval, None, 0, s);
                s
            }
            Err(error) => {
                return Err(TrainError::Aborted {
                    error,
                    history: Box::new(history),
                })
            }
        };
        total += seconds;
    }
    Ok((
        TrainedModel {
            best: selection.best.unwrap_or_else(|| model.clone()),
            last: model,
            history,
        },
        total,
    ))
}

/// One-shot GLC estimate: rows average the stage-1 model's predicted
/// distribution over the trusted samples of each class.
pub fn glc_estimate(stage1: &ModelParams, clean: &[Sample]) -> Result<TransitionMatrix> {
    let outputs = head_probabilities(stage1, clean, ScoringHead::Clean)?;
    let labels: Vec<usize> = clean.iter().map(Sample::y_true).collect();
    estimate_transition(stage1.n_classes(), &labels, &outputs)
}

/// Stage 1 fits a single head to the noisy set; its predictions on the full
/// clean set give a frozen matrix. Stage 2 retrains from `init` with the
/// balanced two-batch loop and that matrix.
pub fn train_glc_two_stage(config: &TrainConfig, splits: &mut DatasetSplits, init: ModelParams) -> TrainResult {
    glc_stages(config, splits, init).map(|(trained, _, _)| trained)
}

/// Like [`train_glc_two_stage`] but also returns the frozen matrix.
pub fn glc_stages(
    config: &TrainConfig,
    splits: &mut DatasetSplits,
    init: ModelParams,
) -> std::result::Result<(TrainedModel, TransitionMatrix, f64), TrainError> {
    let pool: Vec<(Vec<f64>, usize)> = splits
        .noisy_train
        .iter()
        .map(|s| (s.x().to_vec(), s.y_current()))
        .collect();
    let (stage1, stage1_seconds) = single_head_loop(config, splits, init.clone(), &pool, Method::GlcTwoStage)?;
    let t_glc = glc_estimate(&stage1.last, &splits.clean_train)?;
    let spec = LoopSpec {
        method: Method::GlcTwoStage,
        transition: TransitionSource::Fixed(t_glc.clone()),
        noisy_weight: 0.0,
        correction: false,
    };
    let mut trained = run_loop(config, splits, init, &spec).map_err(|e| match e {
        TrainError::Aborted { error, mut history } => {
            history.extra_stage_seconds = stage1_seconds;
            TrainError::Aborted { error, history }
        }
        other => other,
    })?;
    trained.history.extra_stage_seconds = stage1_seconds;
    Ok((trained, t_glc, stage1_seconds))
}
