//! Experiment configuration. TOML is the primary format; JSON is accepted
//! when the file ends in `.json`. Unknown keys are rejected, and every error
//! names the file line it refers to.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fasten_core::data::{BlobSpec, NoiseKind, NoiseSpec, Pairing, SplitFractions, CALIBRATED_SPREAD};
use fasten_core::train::{Method, TrainConfig};
use fasten_core::transition::TransitionMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Write the epoch-mean transition estimate of every epoch as CSV.
    #[serde(default = "yes")]
    pub transition_snapshots: bool,
    /// Write the noisy training set with its final labels.
    #[serde(default)]
    pub write_dataset: bool,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub split: SplitFractions,
}

impl Default for DatasetConfig {
    /// 4 classes of 1200 points: 4000 noisy, 200 clean, 200 valid, 400 test.
    fn default() -> Self {
        DatasetConfig {
            n_classes: 4,
            n_per_class: 1200,
            dim: 16,
            spread: CALIBRATED_SPREAD,
            split: SplitFractions {
                noisy_train: 1000.0 / 1200.0,
                clean_train: 50.0 / 1200.0,
                valid: 50.0 / 1200.0,
                test: 100.0 / 1200.0,
            },
        }
    }
}

impl DatasetConfig {
    pub fn blob_spec(&self, seed: u64) -> BlobSpec {
        BlobSpec {
            n_classes: self.n_classes,
            n_per_class: self.n_per_class,
            dim: self.dim,
            spread: self.spread,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub gamma: f64,
    /// Asymmetric target class per source class; cyclic when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing: Option<Pairing>,
}

impl NoiseConfig {
    pub fn spec(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind,
            gamma: self.gamma,
            pairing: self.pairing.clone(),
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Lambda,
    K,
    Rho,
    Gamma,
    PerturbationRate,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::K => "k",
            SweepParameter::Rho => "rho",
            SweepParameter::Gamma => "gamma",
            SweepParameter::PerturbationRate => "perturbation_rate",
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// The settings of one (sweep value, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedRun {
    pub method: Method,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub parameter: SweepParameter,
    pub value: f64,
}

impl ExperimentConfig {
    /// Sweep points, or a single `None` without a sweep.
    pub fn sweep_points(&self) -> Vec<Option<SweepPoint>> {
        match &self.sweep {
            None => vec![None],
            Some(s) => s
                .values
                .iter()
                .map(|&value| {
                    Some(SweepPoint {
                        parameter: s.parameter,
                        value,
                    })
                })
                .collect(),
        }
    }

    pub fn resolve(&self, point: Option<SweepPoint>, seed: u64) -> ResolvedRun {
        let mut train = self.train.clone();
        let mut noise = self.noise.clone();
        if let Some(p) = point {
            match p.parameter {
                SweepParameter::Lambda => train.lambda = p.value,
                SweepParameter::K => train.k = p.value as usize,
                SweepParameter::Rho => train.rho = p.value,
                SweepParameter::Gamma => noise.gamma = p.value,
                SweepParameter::PerturbationRate => train.perturbation_rate = p.value,
            }
        }
        train.seed = seed;
        ResolvedRun {
            method: self.method,
            seed,
            dataset: self.dataset.clone(),
            noise: noise.spec(seed),
            train,
            sweep: point,
        }
    }

    /// Every semantic problem as `(dotted key, message)`.
    pub fn issues(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, msg: String| out.push((key.to_string(), msg));
        if self.seeds.is_empty() {
            push("seeds", "at least one seed is required".into());
        }
        let d = &self.dataset;
        if d.n_classes < 2 {
            push("dataset.n_classes", format!("need at least 2 classes, got {}", d.n_classes));
        }
        if d.n_per_class == 0 {
            push("dataset.n_per_class", "must be positive".into());
        }
        if d.dim < 2 {
            push("dataset.dim", format!("need at least 2 dimensions, got {}", d.dim));
        }
        if !(d.spread > 0.0 && d.spread.is_finite()) {
            push("dataset.spread", format!("must be positive, got {}", d.spread));
        }
        let fr = [
            ("noisy_train", d.split.noisy_train),
            ("clean_train", d.split.clean_train),
            ("valid", d.split.valid),
            ("test", d.split.test),
        ];
        for (name, f) in fr {
            if !(f > 0.0 && f <= 1.0) {
                push(&format!("dataset.split.{name}"), format!("must lie in (0,1], got {f}"));
            }
        }
        if fr.iter().map(|(_, f)| f).sum::<f64>() > 1.0 + 1e-9 {
            push("dataset.split", "fractions sum to more than 1".into());
        }

        let gammas: Vec<f64> = match &self.sweep {
            Some(s) if s.parameter == SweepParameter::Gamma => s.values.clone(),
            _ => vec![self.noise.gamma],
        };
        for g in gammas {
            let (ok, range) = match self.noise.kind {
                NoiseKind::Symmetric => ((0.0..1.0).contains(&g), "[0,1)"),
                NoiseKind::Asymmetric => ((0.0..0.5).contains(&g), "[0,0.5)"),
            };
            if !ok {
                push("noise.gamma", format!("{g} outside {range} for {:?} noise", self.noise.kind));
            }
        }
        if let Some(p) = &self.noise.pairing {
            if self.noise.kind == NoiseKind::Symmetric {
                push("noise.pairing", "only valid for asymmetric noise".into());
            } else if p.len() != d.n_classes {
                push(
                    "noise.pairing",
                    format!("has {} entries for {} classes", p.len(), d.n_classes),
                );
            }
        }

        for (field, msg) in self.train.issues() {
            push(&format!("train.{field}"), msg);
        }
        let ks: Vec<usize> = match &self.sweep {
            Some(s) if s.parameter == SweepParameter::K => {
                s.values.iter().map(|&v| v as usize).collect()
            }
            _ => vec![self.train.k],
        };
        let clean_per_class = (d.split.clean_train * d.n_per_class as f64 + 1e-9).floor() as usize;
        for k in ks {
            if k > clean_per_class {
                push(
                    "train.k",
                    format!("{k} exceeds the {clean_per_class} clean samples per class"),
                );
            }
        }

        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                push("sweep.values", "at least one value is required".into());
            }
            for &v in &s.values {
                let ok = match s.parameter {
                    SweepParameter::Lambda => v >= 0.0 && v.is_finite(),
                    SweepParameter::K => v >= 1.0 && v.fract() == 0.0,
                    SweepParameter::Rho => v > 0.0 && v <= 1.0,
                    SweepParameter::Gamma => true,
                    SweepParameter::PerturbationRate => (0.0..=1.0).contains(&v),
                };
                if !ok {
                    push("sweep.values", format!("{v} is not a valid {}", s.parameter));
                }
            }
        }
        out
    }

    /// The injection matrix for `run`, needed by the oracle method.
    pub fn oracle(run: &ResolvedRun) -> fasten_core::Result<TransitionMatrix> {
        run.noise.oracle(run.dataset.n_classes)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// `line` is 1-based; `None` when the offending value is a default.
    #[error("{}", render(.path, .line, .message))]
    Invalid {
        path: String,
        line: Option<usize>,
        message: String,
    },
}

fn render(path: &str, line: &Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("{path}:{l}: {message}"),
        None => format!("{path}: {message}"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn of(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text, Format::of(path), &path.display().to_string())
}

/// Parse and validate. `origin` only labels error messages.
pub fn parse(text: &str, format: Format, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let invalid = |line: Option<usize>, message: String| ConfigError::Invalid {
        path: origin.to_string(),
        line,
        message,
    };
    let config: ExperimentConfig = match format {
        Format::Toml => toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            invalid(line, e.message().trim().to_string())
        })?,
        Format::Json => serde_json::from_str(text).map_err(|e| {
            let line = (e.line() > 0).then_some(e.line());
            let msg = e.to_string();
            let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
            invalid(line, msg)
        })?,
    };
    if let Some((key, message)) = config.issues().into_iter().next() {
        let line = locate_key(text, format, &key);
        let suffix = if line.is_none() { " (default value)" } else { "" };
        return Err(invalid(line, format!("{key}{suffix}: {message}")));
    }
    Ok(config)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line where a dotted key is assigned, if it appears in the text.
pub fn locate_key(text: &str, format: Format, dotted: &str) -> Option<usize> {
    let parts: Vec<&str> = dotted.split('.').collect();
    match format {
        Format::Toml => {
            let mut current: Vec<String> = Vec::new();
            // A key naming a whole table points at its header.
            let mut header_line = None;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if let Some(header) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
                    current = header.split('.').map(|s| s.trim().to_string()).collect();
                    if current == parts {
                        header_line = Some(i + 1);
                    }
                    continue;
                }
                let Some((key, _)) = line.split_once('=') else {
                    continue;
                };
                let mut full = current.clone();
                full.extend(key.split('.').map(|s| s.trim().trim_matches('"').to_string()));
                if full == parts {
                    return Some(i + 1);
                }
            }
            header_line
        }
        Format::Json => {
            let mut from = 0;
            for part in &parts {
                let needle = format!("\"{part}\"");
                from += text[from..].find(&needle)?;
            }
            Some(line_of_offset(text, from))
        }
    }
}
