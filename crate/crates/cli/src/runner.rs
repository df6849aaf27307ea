//! Executes an experiment: one training run per (sweep value, seed), each in
//! its own directory, followed by a cross-seed aggregate.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use fasten_core::baselines::train_method;
use fasten_core::data::{generate_blobs, nearest_mean_accuracy, samples_to_csv, split, DatasetSplits};
use fasten_core::metrics::{
    confidence_interval, curve_to_csv, detection_curve, detection_report, head_probabilities,
    recovery_report, ConfidenceInterval, ScoringHead,
};
use fasten_core::nn::ModelParams;
use fasten_core::parallel;
use fasten_core::seed;
use fasten_core::train::{Method, RunHistory, TrainError, TrainedModel};

use crate::config::{ExperimentConfig, ResolvedRun, SweepPoint};
use crate::summary::{self, DatasetStats, Results, Status, Summary, SweepValue, Timing};

/// Identifier of the binary that produced an artifact.
pub const BUILD_ID: &str = match option_env!("FASTEN_BUILD_ID") {
    Some(id) => id,
    None => "unknown",
};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed_override: Option<Vec<u64>>,
    pub strict: bool,
    pub dry_run: bool,
    pub out: Option<PathBuf>,
    /// Worker cap, usually from `FASTEN_THREADS`.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Job {
    pub index: usize,
    pub run: ResolvedRun,
    /// Path relative to the experiment directory.
    pub rel_dir: PathBuf,
}

pub fn plan(config: &ExperimentConfig, seeds: &[u64]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for point in config.sweep_points() {
        for &s in seeds {
            let run = config.resolve(point, s);
            let mut rel = PathBuf::from(run.method.name());
            if let Some(p) = point {
                rel.push(format!("{}={}", p.parameter, p.value));
            }
            rel.push(format!("seed-{s}"));
            jobs.push(Job {
                index: jobs.len(),
                run,
                rel_dir: rel,
            });
        }
    }
    jobs
}

pub fn describe_plan(config: &ExperimentConfig, jobs: &[Job], out_root: &Path) -> String {
    let mut s = format!(
        "method {} | {} run(s) | output under {}\n",
        config.method,
        jobs.len(),
        out_root.display()
    );
    for j in jobs {
        let t = &j.run.train;
        s.push_str(&format!(
            "  [{}] {}  seed={} gamma={} lambda={} k={} rho={} perturbation_rate={} epochs={}\n",
            j.index,
            j.rel_dir.display(),
            j.run.seed,
            j.run.noise.gamma,
            t.lambda,
            t.k,
            t.rho,
            t.perturbation_rate,
            t.epochs
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct JobOutcome {
    pub job: Job,
    pub summary: Summary,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub outcomes: Vec<JobOutcome>,
}

impl RunReport {
    pub fn aborted(&self) -> Vec<&JobOutcome> {
        self.outcomes
            .iter()
            .filter(|o| o.summary.status == Status::Aborted)
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid run setup: {0}")]
    Setup(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// A fresh timestamped directory under `root`; never reuses an existing one.
pub fn fresh_dir(root: &Path) -> Result<PathBuf, RunError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    for n in 0.. {
        let name = if n == 0 {
            format!("run-{stamp}")
        } else {
            format!("run-{stamp}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!()
}

/// Runs the experiment. `None` for a dry run.
pub fn execute(config: &ExperimentConfig, opts: &RunOptions) -> Result<Option<RunReport>, RunError> {
    let seeds = opts.seed_override.clone().unwrap_or_else(|| config.seeds.clone());
    if seeds.is_empty() {
        return Err(RunError::Setup("seed list is empty".into()));
    }
    let jobs = plan(config, &seeds);
    let root = opts.out.clone().unwrap_or_else(|| config.out_dir.clone());
    if opts.dry_run {
        print!("{}", describe_plan(config, &jobs, &root));
        return Ok(None);
    }
    parallel::set_strict(opts.strict);
    if let Some(t) = opts.threads {
        parallel::configure_threads(t);
    }
    let threads = if parallel::enabled() {
        opts.threads.unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
    } else {
        1
    };

    let dir = fresh_dir(&root)?;
    let mut resolved = config.clone();
    resolved.seeds = seeds.clone();
    let mut resolved_json = serde_json::to_string_pretty(&ConfigEcho {
        build: BUILD_ID,
        config: &resolved,
    })
    .expect("config serializes");
    resolved_json.push('\n');
    write(&dir.join("config.resolved.json"), &resolved_json)?;
    write(&dir.join("plan.txt"), &describe_plan(config, &jobs, &dir))?;

    let results = parallel::map_slice(&jobs, |job| run_job(config, job, &dir, threads));
    let mut outcomes = Vec::with_capacity(jobs.len());
    for (job, r) in jobs.iter().zip(results) {
        outcomes.push(JobOutcome {
            job: job.clone(),
            summary: r?,
        });
    }
    let agg = aggregate(&outcomes);
    let mut agg_json = serde_json::to_string_pretty(&agg).expect("aggregate serializes");
    agg_json.push('\n');
    write(&dir.join("aggregate.json"), &agg_json)?;
    write(&dir.join("aggregate.csv"), &aggregate_csv(&agg))?;
    Ok(Some(RunReport { dir, outcomes }))
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    build: &'a str,
    config: &'a ExperimentConfig,
}

/// Everything a job needs before training starts.
pub struct Prepared {
    pub splits: DatasetSplits,
    pub init: ModelParams,
    pub bayes_test_accuracy: f64,
}

pub fn prepare(run: &ResolvedRun) -> fasten_core::Result<Prepared> {
    let spec = run.dataset.blob_spec(run.seed);
    let means = spec.class_means();
    let blobs = generate_blobs(&spec)?;
    let mut splits = split(blobs, run.dataset.n_classes, run.dataset.split, run.seed, run.train.k)?;
    let bayes_test_accuracy = nearest_mean_accuracy(&means, &splits.test);
    splits.inject_noise(&run.noise)?;
    let init = ModelParams::init(
        run.dataset.dim,
        &run.train.hidden,
        run.dataset.n_classes,
        seed::derive(run.seed, "init"),
    )?;
    Ok(Prepared {
        splits,
        init,
        bayes_test_accuracy,
    })
}

pub fn train_run(run: &ResolvedRun, prepared: &mut Prepared) -> Result<TrainedModel, TrainError> {
    let oracle = ExperimentConfig::oracle(run)?;
    train_method(
        run.method,
        &run.train,
        &mut prepared.splits,
        prepared.init.clone(),
        Some(&oracle),
    )
}

fn run_job(config: &ExperimentConfig, job: &Job, root: &Path, threads: usize) -> Result<Summary, RunError> {
    let dir = root.join(&job.rel_dir);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let run = &job.run;
    let mut prepared = prepare(run).map_err(|e| RunError::Setup(e.to_string()))?;
    let stats = DatasetStats {
        n_noisy_train: prepared.splits.noisy_train.len(),
        n_clean_train: prepared.splits.clean_train.len(),
        n_valid: prepared.splits.valid.len(),
        n_test: prepared.splits.test.len(),
        noise_kind: format!("{:?}", run.noise.kind).to_lowercase(),
        gamma: run.noise.gamma,
        bayes_test_accuracy: prepared.bayes_test_accuracy,
    };
    let outcome = train_run(run, &mut prepared);
    let (status, error, history, trained) = match outcome {
        Ok(t) => (Status::Ok, None, t.history.clone(), Some(t)),
        Err(TrainError::Aborted { error, history }) => {
            (Status::Aborted, Some(error.to_string()), *history, None)
        }
        Err(TrainError::Setup(e)) => return Err(RunError::Setup(e.to_string())),
    };

    write(&dir.join("history.csv"), &history.to_csv())?;
    if config.transition_snapshots {
        write_snapshots(&dir, &history)?;
    }
    let mut results = Results::from_history(&history);
    if let Some(t) = &trained {
        let noisy = &prepared.splits.noisy_train;
        results.recovery = recovery_report(&t.best, noisy).ok();
        results.detection = detection_report(&t.best, noisy, ScoringHead::Clean).ok();
        if results.detection.is_some() {
            let probs = head_probabilities(&t.best, noisy, ScoringHead::Clean)
                .map_err(|e| RunError::Setup(e.to_string()))?;
            let scores: Vec<f64> = probs.iter().zip(noisy).map(|(p, s)| 1.0 - p[s.y_star()]).collect();
            let positives: Vec<bool> = noisy.iter().map(|s| s.y_star() != s.y_true()).collect();
            if let Ok(curve) = detection_curve(&scores, &positives) {
                write(&dir.join("detection_curve.csv"), &curve_to_csv(&curve))?;
            }
        }
    }
    if config.write_dataset {
        write(&dir.join("noisy_train.csv"), &samples_to_csv(&prepared.splits.noisy_train))?;
    }
    let summary = Summary {
        schema_version: summary::SCHEMA_VERSION,
        status,
        error,
        method: run.method,
        seed: run.seed,
        sweep: run.sweep.map(|p: SweepPoint| SweepValue {
            parameter: p.parameter.name().to_string(),
            value: p.value,
        }),
        build: BUILD_ID.to_string(),
        config: serde_json::to_value(run).expect("run config serializes"),
        dataset: stats,
        results,
        timing: Timing::from_history(&history, threads, started_at),
    };
    write(&dir.join("summary.json"), &summary::to_json(&summary))?;
    Ok(summary)
}

fn write_snapshots(dir: &Path, history: &RunHistory) -> Result<(), RunError> {
    let snap = dir.join("transition");
    let mut made = false;
    for e in &history.epochs {
        if let Some(t) = &e.transition_hat {
            if !made {
                fs::create_dir_all(&snap).map_err(io_err(&snap))?;
                made = true;
            }
            write(&snap.join(format!("epoch-{:03}.csv", e.epoch)), &t.to_csv())?;
        }
    }
    if let Some(e) = history.last() {
        if made {
            write(&snap.join("true-final.csv"), &e.transition_true.to_csv())?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: Method,
    pub sweep: Option<SweepValue>,
    pub gamma: f64,
    pub runs: usize,
    pub aborted: usize,
    pub test_acc_mean: Option<f64>,
    /// Normal-approximation interval; needs at least two seeds.
    pub test_acc_ci: Option<ConfidenceInterval>,
    pub final_noise_level_mean: Option<f64>,
    pub final_chi2_mean: Option<f64>,
}

/// Mean ± interval of each group of seeds sharing a sweep value.
pub fn aggregate(outcomes: &[JobOutcome]) -> Vec<AggregateRow> {
    let mut rows: Vec<AggregateRow> = Vec::new();
    let mut keys: Vec<(Option<SweepPoint>, f64)> = Vec::new();
    for o in outcomes {
        let key = (o.job.run.sweep, o.job.run.noise.gamma);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for key in keys {
        let group: Vec<&JobOutcome> = outcomes
            .iter()
            .filter(|o| (o.job.run.sweep, o.job.run.noise.gamma) == key)
            .collect();
        let ok: Vec<&Summary> = group
            .iter()
            .map(|o| &o.summary)
            .filter(|s| s.status == Status::Ok)
            .collect();
        let accs: Vec<f64> = ok.iter().filter_map(|s| s.results.test_accuracy).collect();
        let mean = |v: Vec<f64>| -> Option<f64> {
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        rows.push(AggregateRow {
            method: group[0].job.run.method,
            sweep: group[0].summary.sweep.clone(),
            gamma: key.1,
            runs: group.len(),
            aborted: group.len() - ok.len(),
            test_acc_ci: confidence_interval(&accs).ok(),
            test_acc_mean: mean(accs),
            final_noise_level_mean: mean(ok.iter().filter_map(|s| s.results.final_noise_level).collect()),
            final_chi2_mean: mean(ok.iter().filter_map(|s| s.results.final_chi2).collect()),
        });
    }
    rows
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from(
        "method,sweep_parameter,sweep_value,gamma,runs,aborted,test_acc_mean,test_acc_ci_half_width,final_noise_level,final_chi2\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.sweep.as_ref().map(|p| p.parameter.as_str()).unwrap_or(""),
            opt(r.sweep.as_ref().map(|p| p.value)),
            r.gamma,
            r.runs,
            r.aborted,
            opt(r.test_acc_mean),
            opt(r.test_acc_ci.as_ref().map(|c| c.half_width)),
            opt(r.final_noise_level_mean),
            opt(r.final_chi2_mean),
        ));
    }
    s
}
