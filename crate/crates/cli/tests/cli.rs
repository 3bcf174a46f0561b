use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn relwear(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relwear"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = relwear(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Digest over relative paths and contents of every file under `dir`.
fn tree_digest(dir: &Path) -> String {
    let mut h = Sha256::new();
    for p in files(dir) {
        h.update(p.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&p).unwrap());
    }
    hex::encode(h.finalize())
}

fn file_digest(p: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(p).unwrap()))
}

#[test]
fn gen_data_is_reproducible_and_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let a = ok(&["gen-data", "--count", "100", "--seed", "7", "--out", "a"], t);
    ok(&["gen-data", "--count", "100", "--seed", "7", "--out", "b"], t);
    ok(&["gen-data", "--count", "100", "--seed", "7", "--out", "c", "--threads", "3"], t);
    ok(&["gen-data", "--count", "100", "--seed", "8", "--out", "d"], t);
    let da = tree_digest(&t.join("a"));
    assert_eq!(da, tree_digest(&t.join("b")));
    assert_eq!(da, tree_digest(&t.join("c")));
    assert_ne!(da, tree_digest(&t.join("d")));
    assert!(a.contains("worn: ") && a.contains("unworn: "));
    assert!(t.join("a/scenes/scene_000.json").exists());
}

#[test]
fn gen_data_class_mix_follows_the_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(
        &["gen-data", "--count", "10000", "--seed", "3", "--unworn-ratio", "0.37", "--image-size", "32", "--out", "d", "--threads", "2"],
        tmp.path(),
    );
    let count = |key: &str| -> f64 {
        out.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    let share = count("unworn: ") / 10_000.0;
    assert!((share - 0.37).abs() <= 0.03, "{share}");
}

#[test]
fn degenerate_inputs_fail_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let o = relwear(&["gen-data", "--count", "0", "--out", "x"], t);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty() && o.stdout.is_empty());

    let o = relwear(&["compose", "--ps", "1.2", "--po", "0.5", "--pp", "0.5"], t);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outside [0, 1]"));

    let o = relwear(&["eval", "--model", "missing", "--data", "missing"], t);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    ok(&["gen-data", "--count", "40", "--seed", "1", "--out", "d", "--image-size", "32"], t);
    fs::write(t.join("bad.json"), r#"{"version": 1, "train": {"epochs": 1, "lr": 0.1}}"#).unwrap();
    let o = relwear(&["train", "--data", "d", "--config", "bad.json", "--out", "m"], t);
    assert!(!o.status.success());
    // the desk model expects 64×64 images
    fs::write(t.join("rc.json"), r#"{"version": 1, "train": {"epochs": 1}}"#).unwrap();
    let o = relwear(&["train", "--data", "d", "--config", "rc.json", "--out", "m"], t);
    assert!(String::from_utf8_lossy(&o.stderr).contains("image size"));
    assert!(!o.status.success());
}

#[test]
fn compose_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let v: f64 = ok(&["compose", "--ps", "0.98", "--po", "0.99", "--pp", "0.96"], tmp.path())
        .trim()
        .parse()
        .unwrap();
    assert!((v - 0.931).abs() < 1e-3);
    assert_eq!(ok(&["compose", "--ps", "1", "--po", "1", "--pp", "1"], tmp.path()).trim(), "1");
}

#[test]
fn train_eval_predict_round() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--count", "150", "--seed", "4", "--out", "d"], t);
    fs::write(t.join("rc.json"), r#"{"version": 1, "train": {"epochs": 3}}"#).unwrap();
    let log = ok(&["train", "--data", "d", "--config", "rc.json", "--seed", "9", "--out", "m1"], t);
    ok(&["train", "--data", "d", "--config", "rc.json", "--seed", "9", "--out", "m2"], t);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 3);
    assert_eq!(file_digest(&t.join("m1/weights.bin")), file_digest(&t.join("m2/weights.bin")));
    assert_eq!(tree_digest(&t.join("m1")), tree_digest(&t.join("m2")));
    let hist: serde_json::Value = serde_json::from_slice(&fs::read(t.join("m1/history.json")).unwrap()).unwrap();
    assert_eq!(hist["epochs"].as_array().unwrap().len(), 3);

    let table = ok(&["eval", "--model", "m1", "--data", "d", "--roc", "r1/roc.csv"], t);
    let again = ok(&["eval", "--model", "m1", "--data", "d", "--roc", "r2/roc.csv", "--threads", "4"], t);
    assert_eq!(table, again);
    assert_eq!(tree_digest(&t.join("r1")), tree_digest(&t.join("r2")));
    let header = table.lines().next().unwrap();
    assert_eq!(header.split('|').count(), 5);
    assert!(table.lines().nth(1).unwrap().contains('±'));
    let roc = fs::read_to_string(t.join("r1/roc.csv")).unwrap();
    let rows: Vec<&str> = roc.lines().collect();
    assert_eq!(rows[0], "threshold,fpr,tpr");
    assert_eq!(rows[1], "inf,0,0");
    assert!(rows.last().unwrap().ends_with(",1,1"));
    let folds = fs::read_to_string(t.join("r1/roc.folds.csv")).unwrap();
    assert!(folds.starts_with("fold,metric,value\n"));
    assert_eq!(folds.lines().count(), 1 + 10 * 5);
    assert!(t.join("r1/roc.report.json").exists());

    let single = ok(&["eval", "--model", "m1", "--data", "d", "--folds", "1"], t);
    assert!(!single.contains('±'));

    let scene = "d/scenes/scene_001.json";
    let text = ok(&["predict", "--model", "m1", "--scene", scene, "--ps", "0.98", "--po", "0.99"], t);
    let file: serde_json::Value = serde_json::from_slice(&fs::read(t.join(scene)).unwrap()).unwrap();
    let (np, nc) = (
        file["persons"].as_array().unwrap().len(),
        file["clothes"].as_array().unwrap().len(),
    );
    assert!(np >= 2 && nc >= np);
    let csv = fs::read_to_string(t.join("d/scenes/scene_001.predictions.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), np * nc);
    for r in &rows {
        assert!(r[2] > 0.0 && r[2] < 1.0);
        assert!((r[5] - 0.98 * 0.99 * r[2]).abs() < 1e-12);
    }
    let matrix_rows = text.lines().skip(1).take_while(|l| !l.is_empty()).count();
    assert_eq!(matrix_rows, np);
}

#[test]
fn fifty_epoch_default_history() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--count", "40", "--seed", "2", "--out", "d"], t);
    ok(&["train", "--data", "d", "--seed", "1", "--out", "m"], t);
    let hist: serde_json::Value = serde_json::from_slice(&fs::read(t.join("m/history.json")).unwrap()).unwrap();
    let epochs = hist["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 50);
    let best = hist["best_val_accuracy"].as_f64().unwrap();
    assert!(epochs.iter().all(|e| e["val_accuracy"].as_f64().unwrap() <= best));
}

#[test]
fn every_mode_trains_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--count", "40", "--seed", "5", "--out", "d"], t);
    for (mode, placement) in [("soft", "all"), ("hard", "all"), ("box", "first"), ("none", "all")] {
        let mut model = serde_json::to_value(relwear_core::nn::ModelConfig::desk()).unwrap();
        model["attention"] = mode.into();
        model["placement"] = placement.into();
        let rc = serde_json::json!({"version": 1, "model": model, "train": {"epochs": 1}});
        fs::write(t.join("rc.json"), rc.to_string()).unwrap();
        let out = format!("m-{mode}");
        ok(&["train", "--data", "d", "--config", "rc.json", "--out", &out], t);
        ok(&["eval", "--model", &out, "--data", "d", "--folds", "2"], t);
        ok(&["predict", "--model", &out, "--scene", "d/scenes/scene_000.json"], t);
    }
}
