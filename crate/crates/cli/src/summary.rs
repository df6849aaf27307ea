//! The per-run `summary.json` document. Everything except `timing` is a
//! pure function of the resolved config and the build.

use serde::{Deserialize, Serialize};

use fasten_core::metrics::{DetectionReport, RecoveryReport};
use fasten_core::train::{Method, RunHistory};

pub const SCHEMA_VERSION: u32 = 1;

/// Top-level keys in serialization order.
pub const TOP_LEVEL_KEYS: [&str; 11] = [
    "schema_version",
    "status",
    "error",
    "method",
    "seed",
    "sweep",
    "build",
    "config",
    "dataset",
    "results",
    "timing",
];

/// Keys that vary between identical runs.
pub const TIMING_KEY: &str = "timing";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub status: Status,
    pub error: Option<String>,
    pub method: Method,
    pub seed: u64,
    pub sweep: Option<SweepValue>,
    pub build: String,
    /// The fully resolved run configuration.
    pub config: serde_json::Value,
    pub dataset: DatasetStats,
    pub results: Results,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepValue {
    pub parameter: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_noisy_train: usize,
    pub n_clean_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub noise_kind: String,
    pub gamma: f64,
    /// Nearest-true-mean accuracy on the test split.
    pub bayes_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    /// Test accuracy of the best-validation model.
    pub test_accuracy: Option<f64>,
    pub valid_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub initial_noise_level: f64,
    pub final_noise_level: Option<f64>,
    pub final_chi2: Option<f64>,
    pub final_mean_diag_hat: Option<f64>,
    pub final_mean_diag_true: Option<f64>,
    pub corrections: usize,
    pub final_transition_hat: Option<Vec<Vec<f64>>>,
    pub detection: Option<DetectionReport>,
    pub recovery: Option<RecoveryReport>,
}

impl Results {
    pub fn from_history(history: &RunHistory) -> Self {
        let best = history.best();
        let last = history.last();
        Results {
            epochs_completed: history.epochs.len(),
            best_epoch: history.best_epoch,
            test_accuracy: best.map(|e| e.test_acc),
            valid_accuracy: best.map(|e| e.valid_acc),
            final_test_accuracy: last.map(|e| e.test_acc),
            initial_noise_level: history.initial_noise_level,
            final_noise_level: last.map(|e| e.noise_level),
            final_chi2: last.and_then(|e| e.chi2),
            final_mean_diag_hat: last.and_then(|e| e.mean_diag_hat),
            final_mean_diag_true: last.map(|e| e.mean_diag_true),
            corrections: last.map(|e| e.corrections).unwrap_or(0),
            final_transition_hat: last.and_then(|e| e.transition_hat.as_ref()).map(|t| {
                (0..t.n_classes()).map(|i| t.row(i).to_vec()).collect()
            }),
            detection: None,
            recovery: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Training time of every stage, excluding evaluation.
    pub total_seconds: f64,
    pub extra_stage_seconds: f64,
    pub epoch_seconds: Vec<f64>,
    pub median_iteration_seconds: Option<f64>,
    pub threads: usize,
    pub started_at: String,
}

impl Timing {
    pub fn from_history(history: &RunHistory, threads: usize, started_at: String) -> Self {
        Timing {
            total_seconds: history.total_seconds(),
            extra_stage_seconds: history.extra_stage_seconds,
            epoch_seconds: history.epochs.iter().map(|e| e.epoch_seconds).collect(),
            median_iteration_seconds: history.median_iteration_seconds(),
            threads,
            started_at,
        }
    }
}

/// `summary` as pretty JSON with a trailing newline.
pub fn to_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

/// The document with its timing block removed, for reproducibility checks.
pub fn without_timing(json: &str) -> serde_json::Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    if let Some(map) = v.as_object_mut() {
        map.remove(TIMING_KEY);
    }
    Ok(v)
}

/// History CSV with the `epoch_seconds` column dropped.
pub fn history_without_timing(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rsplit_once(',') {
            Some((head, _)) => head.to_string(),
            None => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}
