use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn voxscreen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxscreen")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small synthetic corpus and a config training a cheap model on it.
fn workspace(speakers: usize, extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = voxscreen(dir.path(), &["synth", "--seed", "11", "--speakers", &speakers.to_string(), "--out", "corpus"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        format!(
            r#"{{"seed": 11, "paths": {{"manifest": "corpus/manifest.csv", "output_dir": "runs"}},
               "model": {{"encoder_type": "CNN", "n_fragments": 5}},
               "train": {{"max_epochs": 2, "eval_repeats": 2}}{extra}}}"#
        ),
    )
    .unwrap();
    (dir, config)
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxscreen(dir.path(), &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxscreen(dir.path(), &["bogus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxscreen(dir.path(), &["synth", "--out", "corpus"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
    assert!(!dir.path().join("corpus").exists());
}

#[test]
fn invalid_config_names_the_key_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), r#"{"seed": 1, "train": {"focal_gamma": "two"}}"#).unwrap();
    let out = voxscreen(dir.path(), &["synth", "-c", "run.json", "--out", "corpus"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.focal_gamma"), "{}", stderr(&out));
    assert!(!dir.path().join("corpus").exists());

    fs::write(dir.path().join("run.json"), r#"{"seed": 1, "paths": {"manifest": "missing.csv"}}"#).unwrap();
    let out = voxscreen(dir.path(), &["train", "-c", "run.json", "--out", "runs"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("paths.manifest"), "{}", stderr(&out));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn train_then_eval_reports_the_metrics_contract() {
    let (dir, _) = workspace(12, "");
    let out = voxscreen(dir.path(), &["train", "-c", "run.json", "--fold", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let runs = dir.path().join("runs");
    for f in ["CNN-k5-n5-fold0.ckpt", "CNN-k5-n5-fold0-history.csv", "folds.json", "train.manifest.json"] {
        assert!(runs.join(f).is_file(), "missing {f}");
    }

    let out = voxscreen(dir.path(), &["eval", "-c", "run.json", "--checkpoint", "runs/CNN-k5-n5-fold0.ckpt", "--fold", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&fs::read_to_string(runs.join("eval-CNN-k5-n5-fold0.json")).unwrap()).unwrap();
    assert!(report["pr_auc"].as_f64().is_some_and(|v| (0.0..=1.0).contains(&v)));
    for k in ["f1", "precision", "recall", "threshold"] {
        assert!(report["best_f1"][k].is_number(), "best_f1.{k}");
    }
    let rows = report["severity_rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r["band"].is_string() && r["f1"].is_number()));

    let manifest: Value = serde_json::from_str(&fs::read_to_string(runs.join("eval.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["config_hash"].as_str().is_some_and(|h| h.len() == 8));

    let out = voxscreen(dir.path(), &["eval", "-c", "run.json", "--seed", "12", "--checkpoint", "runs/CNN-k5-n5-fold0.ckpt"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn identical_runs_give_identical_artifacts() {
    let (dir, _) = workspace(12, "");
    for out_dir in ["a", "b"] {
        let out = voxscreen(dir.path(), &["train", "-c", "run.json", "--fold", "1", "--out", out_dir]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/train.manifest.json")).unwrap()).unwrap();
    let mut names: Vec<String> =
        manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    names.push("train.manifest.json".into());
    for name in names {
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b").join(&name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    assert!(dir.path().join("a/run.log").is_file());
}

#[test]
fn cluster_writes_features_and_report() {
    let (dir, _) = workspace(10, r#", "cluster": {"fragments": 200, "restarts": 3}"#);
    let out = voxscreen(dir.path(), &["train", "-c", "run.json", "--fold", "0", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = voxscreen(dir.path(), &["cluster", "-c", "run.json", "--checkpoint", "runs/CNN-k5-n5-fold0.ckpt"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("Cluster A: Depressed "), "{stdout}");
    let features = fs::read_to_string(dir.path().join("runs/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 201);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("runs/cluster_report.json")).unwrap()).unwrap();
    assert_eq!(report["clusters"].as_array().unwrap().len(), 3);

    let out = voxscreen(dir.path(), &["cluster", "-c", "run.json", "--fragments", "100000", "--checkpoint", "runs/CNN-k5-n5-fold0.ckpt"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn grid_writes_45_aggregated_rows() {
    let (dir, _) = workspace(6, r#", "folds": 2"#);
    let out = voxscreen(dir.path(), &["grid", "-c", "run.json", "--epochs", "1", "--jobs", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("runs/table_s1.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("sample_size,kernel_size,encoder,pr_auc_mean,pr_auc_stderr,folds_ok"));
    assert_eq!(lines.count(), 45);
    let cells = fs::read_to_string(dir.path().join("runs/cells.jsonl")).unwrap();
    assert_eq!(cells.lines().count(), 90);
    let top = fs::read_to_string(dir.path().join("runs/top5.txt")).unwrap();
    assert_eq!(top.lines().count(), 6);

    // A rerun finds every cell in the journal and trains nothing.
    let out = voxscreen(dir.path(), &["grid", "-c", "run.json", "--epochs", "1"]);
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).is_empty(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(dir.path().join("runs/table_s1.csv")).unwrap(), table);
}
