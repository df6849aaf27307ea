//! Consolidates every `summary.json` below a directory into one comparison
//! table: method × noise level, mean accuracy ± interval, label cleansing,
//! final divergence and training time.

use std::path::{Path, PathBuf};

use fasten_core::metrics::confidence_interval;

use crate::summary::{Status, Summary};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub noise_kind: String,
    pub gamma: f64,
    pub sweep_parameter: Option<String>,
    pub sweep_value: Option<f64>,
    pub runs: usize,
    pub test_acc_mean: f64,
    pub test_acc_ci_half_width: Option<f64>,
    pub initial_noise_level: f64,
    pub final_noise_level: f64,
    pub final_chi2: Option<f64>,
    /// Mean training wall time per run.
    pub wall_seconds: f64,
}

impl ReportRow {
    pub fn noise_reduction(&self) -> f64 {
        self.initial_noise_level - self.final_noise_level
    }
}

#[derive(Clone, Debug, Default)]
pub struct Collected {
    pub summaries: Vec<(PathBuf, Summary)>,
    /// Paths that could not be used, with the reason.
    pub problems: Vec<(PathBuf, String)>,
}

/// Find run directories below `root`: any directory holding a history or a
/// summary.
pub fn collect(root: &Path) -> Collected {
    let mut out = Collected::default();
    if !root.is_dir() {
        out.problems.push((root.to_path_buf(), "not a directory".into()));
        return out;
    }
    let mut dirs: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .filter(|e| matches!(e.file_name().to_str(), Some("summary.json" | "history.csv")))
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    dirs.dedup();
    for dir in dirs {
        let path = dir.join("summary.json");
        match std::fs::read_to_string(&path) {
            Err(_) => out.problems.push((path, "missing summary".into())),
            Ok(text) => match serde_json::from_str::<Summary>(&text) {
                Ok(s) if s.status == Status::Aborted => out.problems.push((
                    path,
                    format!("aborted: {}", s.error.clone().unwrap_or_default()),
                )),
                Ok(s) if s.results.test_accuracy.is_none() => {
                    out.problems.push((path, "no completed epoch".into()))
                }
                Ok(s) => out.summaries.push((path, s)),
                Err(e) => out.problems.push((path, format!("corrupt summary: {e}"))),
            },
        }
    }
    out
}

pub fn build_table(summaries: &[(PathBuf, Summary)]) -> Vec<ReportRow> {
    type Key = (String, String, u64, Option<String>, Option<u64>);
    let key_of = |s: &Summary| -> Key {
        (
            s.method.name().to_string(),
            s.dataset.noise_kind.clone(),
            s.dataset.gamma.to_bits(),
            s.sweep.as_ref().map(|p| p.parameter.clone()),
            s.sweep.as_ref().map(|p| p.value.to_bits()),
        )
    };
    let mut keys: Vec<Key> = summaries.iter().map(|(_, s)| key_of(s)).collect();
    keys.sort();
    keys.dedup();
    let mut rows: Vec<ReportRow> = keys
        .into_iter()
        .map(|key| {
            let group: Vec<&Summary> = summaries
                .iter()
                .map(|(_, s)| s)
                .filter(|s| key_of(s) == key)
                .collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&Summary) -> f64| group.iter().map(|s| f(s)).sum::<f64>() / n;
            let accs: Vec<f64> = group.iter().filter_map(|s| s.results.test_accuracy).collect();
            let chi2: Vec<f64> = group.iter().filter_map(|s| s.results.final_chi2).collect();
            ReportRow {
                method: key.0,
                noise_kind: key.1,
                gamma: f64::from_bits(key.2),
                sweep_parameter: key.3,
                sweep_value: key.4.map(f64::from_bits),
                runs: group.len(),
                test_acc_mean: accs.iter().sum::<f64>() / accs.len() as f64,
                test_acc_ci_half_width: confidence_interval(&accs).ok().map(|c| c.half_width),
                initial_noise_level: mean(&|s| s.results.initial_noise_level),
                final_noise_level: mean(&|s| {
                    s.results.final_noise_level.unwrap_or(s.results.initial_noise_level)
                }),
                final_chi2: (!chi2.is_empty()).then(|| chi2.iter().sum::<f64>() / chi2.len() as f64),
                wall_seconds: mean(&|s| s.timing.total_seconds),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.gamma.total_cmp(&b.gamma))
            .then(a.noise_kind.cmp(&b.noise_kind))
            .then(a.sweep_parameter.cmp(&b.sweep_parameter))
            .then(a.sweep_value.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.sweep_value.unwrap_or(f64::NEG_INFINITY)))
    });
    rows
}

pub const CSV_HEADER: &str = "method,noise_kind,gamma,sweep_parameter,sweep_value,runs,test_acc_mean,test_acc_ci_half_width,initial_noise_level,final_noise_level,noise_reduction,final_chi2,wall_seconds";

pub fn to_csv(rows: &[ReportRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.noise_kind,
            r.gamma,
            r.sweep_parameter.as_deref().unwrap_or(""),
            opt(r.sweep_value),
            r.runs,
            r.test_acc_mean,
            opt(r.test_acc_ci_half_width),
            r.initial_noise_level,
            r.final_noise_level,
            r.noise_reduction(),
            opt(r.final_chi2),
            r.wall_seconds
        ));
    }
    s
}

pub fn to_text(rows: &[ReportRow], problems: &[(PathBuf, String)]) -> String {
    let header = [
        "method", "noise", "gamma", "sweep", "runs", "test acc (%)", "noise lvl", "chi2", "time (s)",
    ];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            let acc = match r.test_acc_ci_half_width {
                Some(h) => format!("{:.2} ± {:.2}", 100.0 * r.test_acc_mean, 100.0 * h),
                None => format!("{:.2}", 100.0 * r.test_acc_mean),
            };
            [
                r.method.clone(),
                r.noise_kind.clone(),
                format!("{}", r.gamma),
                match (&r.sweep_parameter, r.sweep_value) {
                    (Some(p), Some(v)) => format!("{p}={v}"),
                    _ => "-".into(),
                },
                r.runs.to_string(),
                acc,
                format!("{:.3} -> {:.3}", r.initial_noise_level, r.final_noise_level),
                r.final_chi2.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into()),
                format!("{:.2}", r.wall_seconds),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(&header.map(String::from));
    s.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    for row in &body {
        s.push_str(&line(row));
    }
    if !problems.is_empty() {
        s.push_str("\nskipped:\n");
        for (p, why) in problems {
            s.push_str(&format!("  {}: {why}\n", p.display()));
        }
    }
    s
}
