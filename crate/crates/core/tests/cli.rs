use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn tiny_plan() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny_plan.json")
}

fn adapt2(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_adapt2")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "adapt2 {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn single_target_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = tiny_plan();
    let plan = plan.to_str().unwrap();
    adapt2(d, &["synth", "--seed", "3", "--windows-per-class", "12", "--out", "set.ads"]);
    adapt2(d, &["split", "--data", "set.ads", "--target", "1", "--shots", "2", "--seed", "0", "--out", "split.json"]);
    assert_eq!(json(&d.join("split.json"))["target_domain"], 1);

    adapt2(d, &["pretrain", "--data", "set.ads", "--split", "split.json", "--plan", plan, "--out", "plain.bin", "--log", "plain.json"]);
    adapt2(d, &["meta-pretrain", "--data", "set.ads", "--split", "split.json", "--plan", plan, "--epochs", "2", "--out", "meta.bin", "--log", "meta.json"]);
    assert_eq!(json(&d.join("meta.json"))["log"]["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(json(&d.join("plain.json"))["origin"], "plain");

    adapt2(d, &["adapt", "--model", "meta.bin", "--data", "set.ads", "--split", "split.json", "--plan", plan, "--mode", "full", "--replay-steps", "3", "--out", "full.bin", "--log", "full.json"]);
    let log = json(&d.join("full.json"));
    assert_eq!(log["pipeline"]["replay"]["step_losses"].as_array().unwrap().len(), 3);
    assert!(log["test"]["macro_f1"].as_f64().unwrap() >= 0.0);

    adapt2(d, &["finetune", "--model", "plain.bin", "--data", "set.ads", "--split", "split.json", "--protocol", "end-to-end", "--epochs", "4", "--out", "ft.bin", "--log", "ft.json"]);
    assert_eq!(json(&d.join("ft.json"))["finetune"]["losses"].as_array().unwrap().len(), 4);

    adapt2(d, &["dump-embeddings", "--model", "full.bin", "--data", "set.ads", "--split", "split.json", "--set", "test", "--out", "emb.csv"]);
    let split = json(&d.join("split.json"));
    let rows = fs::read_to_string(d.join("emb.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + split["target_test"].as_array().unwrap().len());
}

#[test]
fn adapt_refuses_a_mode_that_needs_other_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = tiny_plan();
    let plan = plan.to_str().unwrap();
    adapt2(d, &["synth", "--windows-per-class", "12", "--out", "set.ads"]);
    adapt2(d, &["split", "--data", "set.ads", "--target", "0", "--shots", "1", "--out", "split.json"]);
    adapt2(d, &["pretrain", "--data", "set.ads", "--split", "split.json", "--plan", plan, "--epochs", "1", "--out", "plain.bin", "--log", "log.json"]);
    let out = Command::new(env!("CARGO_BIN_EXE_adapt2"))
        .current_dir(d)
        .args(["adapt", "--model", "plain.bin", "--data", "set.ads", "--split", "split.json", "--plan", plan, "--mode", "full", "--out", "x.bin"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn sweep_rerun_writes_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = tiny_plan();
    let plan = plan.to_str().unwrap();
    adapt2(d, &["sweep", "--plan", plan, "--out", "a"]);
    adapt2(d, &["sweep", "--plan", plan, "--out", "b"]);
    assert_eq!(fs::read(d.join("a/results.json")).unwrap(), fs::read(d.join("b/results.json")).unwrap());
    assert!(json(&d.join("a/run_info.json"))["wall_seconds"].as_f64().is_some());
}

#[test]
fn bad_plans_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.json"), r#"{"meta": {"K": 0}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_adapt2")).current_dir(dir.path()).args(["sweep", "--plan", "p.json", "--out", "o"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
