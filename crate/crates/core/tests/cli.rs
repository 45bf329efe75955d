use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ttawpca(config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ttawpca"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn small(dir: &Path, extra: Value) -> std::path::PathBuf {
    let mut cfg = json!({
        "dataset": {"n_train": 400, "n_test": 128},
        "train": {"epochs": 4},
        "pca": {"rank": 16},
        "severities": [0, 5],
        "replicates": [0],
        "corruptions": ["gaussian-noise", "contrast"]
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_fit_adapt_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), json!({}));
    let (model, basis) = (dir.path().join("m.ckpt"), dir.path().join("basis.json"));

    let out = ttawpca(Some(&cfg), &["train", "--out", s(&model)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["clean_test_accuracy"].as_f64().unwrap() >= 0.9);

    let out = ttawpca(Some(&cfg), &["fit-pca", "--model", s(&model), "--out", s(&basis)]);
    assert_eq!(out.status.code(), Some(0));
    let fitted: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(fitted["rank"], 16);

    let records = dir.path().join("r.jsonl");
    let out = ttawpca(
        Some(&cfg),
        &["adapt", "--model", s(&model), "--basis", s(&basis), "--method", "ttawpca-relu",
          "--corruption", "contrast", "--severity", "5", "--out", s(&records)],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["adaptation_params"], 16);
    assert_eq!(summary["frozen_intact"], true);
    let lines = std::fs::read_to_string(&records).unwrap();
    assert_eq!(lines.lines().count(), 2);
    for line in lines.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["method"], "ttawpca-relu");
    }

    // The checkpointed bench matches the bench that trains its own model.
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(ttawpca(Some(&cfg), &["bench", "--out-dir", s(&a)]).status.code(), Some(0));
    let out = ttawpca(Some(&cfg), &["bench", "--out-dir", s(&b), "--model", s(&model), "--basis", s(&basis)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(a.join("errors.csv")).unwrap(), std::fs::read(b.join("errors.csv")).unwrap());
}

#[test]
fn ablations_write_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), json!({"methods": ["tent", "ttawpca-exp"]}));
    let out_dir = dir.path().join("out");
    let out = ttawpca(Some(&cfg), &["ablate-rank", "--out-dir", s(&out_dir), "--ranks", "2,8"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("rank.csv")).unwrap();
    assert!(csv.starts_with("rank,method,replicate_0,mean\n1,ttawpca-exp,"), "{csv}");

    let out = ttawpca(Some(&cfg), &["ablate-steps", "--out-dir", s(&out_dir), "--steps", "1,2"]);
    assert_eq!(out.status.code(), Some(0));
    let curve: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("steps.json")).unwrap()).unwrap();
    assert_eq!(curve["points"].as_array().unwrap().len(), 4);
    assert_eq!(curve["protocol"], "online");
}

#[test]
fn verify_ridge_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ridge.json");
    let out = ttawpca(None, &["verify-ridge", "--trials", "50", "--seed", "7", "--out", s(&path)]);
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["trials"], 50);
    assert!(report["max_relative_deviation"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"adapt": {"lr": 0.1}, "seeds": 3}"#).unwrap();
    let out = ttawpca(Some(&bad), &["bench", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("adapt.lr") && err.contains("seeds"), "{err}");

    let missing = dir.path().join("missing.json");
    assert_eq!(ttawpca(Some(&missing), &["bench", "--out-dir", s(dir.path())]).status.code(), Some(2));

    let cfg = small(dir.path(), json!({}));
    let out = ttawpca(Some(&cfg), &["ablate-steps", "--out-dir", s(dir.path()), "--steps", "4,2"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(ttawpca(None, &["bench"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), json!({}));
    let nope = dir.path().join("nope.ckpt");
    let out = ttawpca(Some(&cfg), &["bench", "--out-dir", s(dir.path()), "--model", s(&nope)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}

#[test]
fn divergent_adaptation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(
        dir.path(),
        json!({"adapt": {"learning_rate": 1e308, "steps_per_batch": 3}, "methods": ["tent"], "severities": [5]}),
    );
    let out = ttawpca(Some(&cfg), &["bench", "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
