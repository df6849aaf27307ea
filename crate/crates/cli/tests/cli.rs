use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fasten_cli::summary::{history_without_timing, without_timing, Summary, TOP_LEVEL_KEYS};

fn fasten(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fasten"))
        .args(args)
        .env_remove("FASTEN_THREADS")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, method: &str, extra: &str) -> PathBuf {
    let path = dir.join(format!("{method}.toml"));
    let text = format!(
        r#"method = "{method}"
seeds = [1, 2]
out_dir = "{out}"

[dataset]
n_per_class = 120

[noise]
kind = "symmetric"
gamma = 0.5

[train]
epochs = 3
hidden = [16]
k = 4
{extra}"#,
        out = dir.join("results").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map(|r| r.map(|e| e.unwrap().path()).collect())
        .unwrap_or_default();
    dirs.sort();
    dirs
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "fasten", "");
    let out = fasten(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("2 run(s)"), "{}", stdout(&out));
    assert!(!tmp.path().join("results").exists());
}

#[test]
fn lambda_grid_over_five_seeds_plans_thirty_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(
        tmp.path(),
        "fasten",
        "\n[sweep]\nparameter = \"lambda\"\nvalues = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0]\n",
    );
    let out = fasten(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--dry-run",
        "--seed-override",
        "0,1,2,3,4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let plan = stdout(&out);
    assert!(plan.contains("30 run(s)"), "{plan}");
    assert!(plan.contains("fasten/lambda=0.05/seed-4"), "{plan}");
}

#[test]
fn invalid_config_exits_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "fasten", "momentum = 1.5\n");
    let out = fasten(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let expected = format!("{}:16: train.momentum", cfg.display());
    assert!(stderr(&out).contains(&expected), "{}", stderr(&out));

    let cfg = small_config(tmp.path(), "fasten", "batch = 3\n");
    let out = fasten(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(&format!("{}:16:", cfg.display())), "{}", stderr(&out));

    let out = fasten(&["run", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_cap_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "fasten", "");
    let out = Command::new(env!("CARGO_BIN_EXE_fasten"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--dry-run"])
        .env("FASTEN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_abort_exits_3_with_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "fasten", "lr = 1e300\n");
    let out = fasten(&["run", "--config", cfg.to_str().unwrap(), "--seed-override", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let run = &run_dirs(&tmp.path().join("results"))[0];
    let seed_dir = run.join("fasten/seed-1");
    let history = fs::read_to_string(seed_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,"));
    let summary: Summary =
        serde_json::from_str(&fs::read_to_string(seed_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.status, fasten_cli::summary::Status::Aborted);
    assert!(summary.error.unwrap().contains("non-finite"));
}

#[test]
fn artifacts_follow_the_documented_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "fasten", "");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("seeds = [1, 2]", "seeds = [1, 2]\nwrite_dataset = true")).unwrap();
    let out = fasten(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = &run_dirs(&tmp.path().join("results"))[0];
    let dir = run.join("fasten/seed-2");

    let json = fs::read_to_string(dir.join("summary.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expected = TOP_LEVEL_KEYS.to_vec();
    expected.sort();
    let mut got = keys.clone();
    got.sort();
    assert_eq!(got, expected);
    let object_keys = |v: &serde_json::Value| -> Vec<String> {
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    assert_eq!(
        object_keys(&value["results"]),
        [
            "best_epoch", "corrections", "detection", "epochs_completed", "final_chi2",
            "final_mean_diag_hat", "final_mean_diag_true", "final_noise_level", "final_test_accuracy",
            "final_transition_hat", "initial_noise_level", "recovery", "test_accuracy", "valid_accuracy",
        ]
    );
    assert_eq!(
        object_keys(&value["timing"]),
        ["epoch_seconds", "extra_stage_seconds", "median_iteration_seconds", "started_at", "threads", "total_seconds"]
    );
    assert_eq!(
        object_keys(&value["dataset"]),
        ["bayes_test_accuracy", "gamma", "n_clean_train", "n_noisy_train", "n_test", "n_valid", "noise_kind"]
    );
    assert_eq!(object_keys(&value["config"]), ["dataset", "method", "noise", "seed", "train"]);
    assert_eq!(value["status"], "ok");
    assert_eq!(value["seed"], 2);
    assert!(value["build"].as_str().is_some_and(|b| !b.is_empty()));
    let summary: Summary = serde_json::from_str(&json).unwrap();
    assert_eq!(summary.results.epochs_completed, 3);
    assert_eq!(summary.dataset.n_noisy_train + summary.dataset.n_test, 400 + 40);

    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_acc,valid_acc,test_acc,noise_level,chi2,mean_diag_hat,mean_diag_true,corrections,epoch_seconds"
    );
    assert_eq!(lines.count(), 3);

    let t_hat = fs::read_to_string(dir.join("transition/epoch-002.csv")).unwrap();
    assert_eq!(t_hat.lines().next().unwrap(), "0,1,2,3");
    assert_eq!(t_hat.lines().count(), 5);
    let parsed = fasten_core::transition::TransitionMatrix::from_csv(&t_hat).unwrap();
    assert_eq!(parsed.n_classes(), 4);

    let curve = fs::read_to_string(dir.join("detection_curve.csv")).unwrap();
    assert!(curve.starts_with("threshold,tpr,fpr,precision,recall\n"));

    let data = fs::read_to_string(dir.join("noisy_train.csv")).unwrap();
    assert!(data.starts_with("x0,x1,"));
    assert!(data.lines().next().unwrap().ends_with(",x15,y_true,y_star,y_current"));
    let samples = fasten_core::data::samples_from_csv(&data).unwrap();
    assert_eq!(fasten_core::data::samples_to_csv(&samples), data);

    let resolved = fs::read_to_string(run.join("config.resolved.json")).unwrap();
    assert!(resolved.contains("\"build\""));
    assert!(run.join("aggregate.csv").exists());
}

#[test]
fn strict_reruns_are_identical_apart_from_timing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "fasten", "");
    for _ in 0..2 {
        let out = fasten(&["run", "--config", cfg.to_str().unwrap(), "--strict"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let dirs = run_dirs(&tmp.path().join("results"));
    assert_eq!(dirs.len(), 2, "each run gets a fresh directory");
    for seed in [1, 2] {
        let read = |d: &Path, f: &str| fs::read_to_string(d.join(format!("fasten/seed-{seed}/{f}"))).unwrap();
        assert_eq!(
            without_timing(&read(&dirs[0], "summary.json")).unwrap(),
            without_timing(&read(&dirs[1], "summary.json")).unwrap()
        );
        assert_eq!(
            history_without_timing(&read(&dirs[0], "history.csv")),
            history_without_timing(&read(&dirs[1], "history.csv"))
        );
    }
    assert_eq!(
        fs::read(dirs[0].join("aggregate.json")).unwrap(),
        fs::read(dirs[1].join("aggregate.json")).unwrap()
    );
}

#[test]
fn parallel_and_strict_runs_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "fasten_no_lc", "");
    let a = fasten(&["run", "--config", cfg.to_str().unwrap(), "--strict"]);
    let b = Command::new(env!("CARGO_BIN_EXE_fasten"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("FASTEN_THREADS", "3")
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    let dirs = run_dirs(&tmp.path().join("results"));
    let read = |d: &Path| fs::read_to_string(d.join("fasten_no_lc/seed-1/summary.json")).unwrap();
    assert_eq!(without_timing(&read(&dirs[0])).unwrap(), without_timing(&read(&dirs[1])).unwrap());
}

#[test]
fn json_config_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("exp.json");
    fs::write(
        &path,
        r#"{
  "method": "oracle_t",
  "seeds": [5],
  "noise": {"kind": "asymmetric", "gamma": 0.3},
  "train": {"epochs": 1}
}"#,
    )
    .unwrap();
    let out = fasten(&["run", "--config", path.to_str().unwrap(), "--dry-run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("oracle_t/seed-5"));
}

#[test]
fn report_builds_sorted_table() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("results");
    for method in ["vanilla_ce", "fasten", "glc_two_stage"] {
        let cfg = small_config(tmp.path(), method, "");
        let out = fasten(&["run", "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{method}: {}", stderr(&out));
    }
    let gamma_cfg = small_config(
        tmp.path(),
        "fasten",
        "\n[sweep]\nparameter = \"gamma\"\nvalues = [0.2]\n",
    );
    assert!(fasten(&["run", "--config", gamma_cfg.to_str().unwrap()]).status.success());
    let broken = results.join("broken/seed-0");
    fs::create_dir_all(&broken).unwrap();
    fs::write(broken.join("summary.json"), "{not json").unwrap();

    let out = fasten(&["report", results.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("skipped"));
    assert!(stderr(&out).contains("corrupt summary"));

    let csv = fs::read_to_string(results.join("report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let order: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[2])).collect();
    assert_eq!(
        order,
        [("fasten", "0.2"), ("fasten", "0.5"), ("glc_two_stage", "0.5"), ("vanilla_ce", "0.5")]
    );
    assert!(rows.iter().all(|r| r[5] == "2"));

    // Wall time equals the summed per-epoch durations of the histories.
    let walls: Vec<f64> = fs::read_dir(&results)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("glc_two_stage").exists())
        .flat_map(|run| {
            [1, 2].map(|s| {
                let dir = run.join(format!("glc_two_stage/seed-{s}"));
                let history = fs::read_to_string(dir.join("history.csv")).unwrap();
                let epochs: f64 = history
                    .lines()
                    .skip(1)
                    .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
                    .sum();
                let summary: Summary =
                    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
                epochs + summary.timing.extra_stage_seconds
            })
        })
        .collect();
    let expected = walls.iter().sum::<f64>() / walls.len() as f64;
    let reported: f64 = rows[2][12].parse().unwrap();
    assert!((reported - expected).abs() <= 0.01 * expected, "{reported} vs {expected}");
}

#[test]
fn report_of_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fasten(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        fasten_cli::config::load(&path).unwrap_or_else(|e| panic!("{e}"));
        n += 1;
    }
    assert!(n >= 3);
}
