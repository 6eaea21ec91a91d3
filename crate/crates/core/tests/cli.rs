use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hint(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hint"))
        .current_dir(dir)
        .args(args)
        .env_remove("HINT_SEED")
        .output()
        .expect("spawn hint")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hint(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    hint(dir, args).status.code().unwrap()
}

const SMALL: &str = "window_length = 16\nhidden_dim = 8\ngru_hidden = 8\ntime_dim = 4\n\
attention_heads = 2\nholdout_ratio = 0.34\nk = 3\nlearning_rate = 3e-3\n";

fn small_data(dir: &Path) {
    ok(dir, &["synth", "--n-mainline", "4", "--n-ramp", "2", "--days", "2", "--seed", "3", "--out", "d", "-q"]);
    fs::write(dir.join("run.conf"), SMALL).unwrap();
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for out in ["a", "b"] {
        ok(dir, &["synth", "--days", "2", "--seed", "7", "--n-mainline", "3", "--n-ramp", "1", "--out", out, "-q"]);
    }
    for f in ["nodes.csv", "distances.csv", "attributes.csv", "simulation.csv", "series.csv"] {
        assert_eq!(fs::read(dir.join("a").join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn build_graph_limits_row_degree() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    let out = ok(dir, &["build-graph", "--data", "d", "--k", "2", "--out", "g"]);
    assert!(out.contains("k 2"));
    let text = fs::read_to_string(dir.join("g/adjacency.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut degree = std::collections::HashMap::<String, usize>::new();
    for rec in rdr.records() {
        *degree.entry(rec.unwrap()[0].to_string()).or_default() += 1;
    }
    assert_eq!(degree.len(), 6);
    assert!(degree.values().all(|&d| d <= 2), "{degree:?}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    assert_eq!(code(dir, &["build-graph", "--data", "d", "--k", "0", "--out", "g"]), 64);
    assert_eq!(code(dir, &["build-graph", "--nodes", "d/nodes.csv", "--distances", "nope.csv", "--out", "g"]), 2);
    assert_eq!(code(dir, &["frobnicate"]), 64);
    assert_eq!(code(dir, &["train", "--data", "d", "--epochs", "x", "--out", "m"]), 64);
    assert_eq!(code(dir, &["--help"]), 0);
    assert_eq!(code(dir, &["train", "--help"]), 0);
    assert_eq!(code(dir, &["--version"]), 0);
    fs::write(dir.join("bad.conf"), "tau = hot\n").unwrap();
    assert_eq!(code(dir, &["--config", "bad.conf", "train", "--data", "d", "--out", "m"]), 64);
}

#[test]
fn train_evaluate_baseline_impute() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    let log = ok(dir, &["--config", "run.conf", "train", "--data", "d", "--epochs", "1", "--seed", "1", "--out", "m"]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 1);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("m/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["notes"]["simulation"], "true");

    ok(dir, &["evaluate", "--data", "d", "--checkpoint", "m/model.ckpt", "--out", "e", "-q"]);
    let metrics = fs::read_to_string(dir.join("e/metrics.csv")).unwrap();
    for col in ["mae", "rmse", "mape", "smape"] {
        assert!(metrics.lines().next().unwrap().split(',').any(|c| c == col), "{metrics}");
    }
    assert!(dir.join("e/metrics_per_node.csv").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 1);
    assert_eq!(report["config_hash"], manifest["config_hash"]);

    let out = ok(dir, &["baseline", "--data", "d", "--checkpoint", "m/model.ckpt", "--method", "knn", "--k", "3", "--out", "b"]);
    assert!(out.contains("knn_k3"));
    assert!(fs::read_to_string(dir.join("b/metrics.csv")).unwrap().contains("knn_k3"));
    ok(dir, &["baseline", "--data", "d", "--method", "mean", "--seed", "1", "--holdout-ratio", "0.34", "--out", "bm", "-q"]);

    ok(dir, &["impute", "--data", "d", "--checkpoint", "m/model.ckpt", "--out", "imp.csv", "-q"]);
    ok(dir, &["impute", "--data", "d", "--checkpoint", "m/model.ckpt", "--out", "imp2.csv", "-q"]);
    let a = fs::read_to_string(dir.join("imp.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.join("imp2.csv")).unwrap());
    assert!(a.starts_with("timestamp,node_id,flow\n"));
    let holdout = manifest["holdout"].as_array().unwrap().len();
    assert_eq!(a.lines().count() - 1, holdout * 39);
}

#[test]
fn mismatched_data_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    ok(dir, &["--config", "run.conf", "train", "--data", "d", "--epochs", "1", "--out", "m", "-q"]);
    fs::create_dir(dir.join("nosim")).unwrap();
    for f in ["nodes.csv", "distances.csv", "attributes.csv", "series.csv"] {
        fs::copy(dir.join("d").join(f), dir.join("nosim").join(f)).unwrap();
    }
    assert_eq!(code(dir, &["evaluate", "--data", "nosim", "--checkpoint", "m/model.ckpt", "--out", "e"]), 4);
}

#[test]
fn no_simulation_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    ok(dir, &["--config", "run.conf", "train", "--data", "d", "--epochs", "1", "--no-simulation", "--out", "m", "-q"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("m/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["notes"]["simulation"], "false");
    assert!(!manifest["columns"].as_array().unwrap().iter().any(|c| c.as_str().unwrap().starts_with("sim_")));
    ok(dir, &["evaluate", "--data", "d", "--checkpoint", "m/model.ckpt", "--out", "e", "-q"]);
}

#[test]
fn identical_seeds_give_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    for out in ["m1", "m2"] {
        ok(dir, &["--config", "run.conf", "train", "--data", "d", "--epochs", "2", "--seed", "4", "--out", out, "-q"]);
    }
    assert_eq!(fs::read(dir.join("m1/manifest.json")).unwrap(), fs::read(dir.join("m2/manifest.json")).unwrap());
    assert_eq!(fs::read(dir.join("m1/model.ckpt")).unwrap(), fs::read(dir.join("m2/model.ckpt")).unwrap());
}

#[test]
fn environment_overrides_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    let out = Command::new(env!("CARGO_BIN_EXE_hint"))
        .current_dir(dir)
        .args(["--config", "run.conf", "train", "--data", "d", "--epochs", "1", "--out", "m", "-q"])
        .env("HINT_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("m/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
}
