use std::path::Path;
use std::process::{Command, Output};

fn galite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_galite")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn delta_table_to_stdout() {
    let o = galite(&["delta", "--r", "4", "--max", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("r,m,n,"));
    assert_eq!(lines.count(), 36);
}

#[test]
fn delta_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = galite(&["delta", "--r", "7", "--max", "3", "--seed", "11", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest["subcommand"], "delta");
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["settings"]["r"], "7");
    assert_eq!(manifest["outputs"][0], "delta.csv");
    assert!(manifest["version"].as_str().unwrap().starts_with("galite "));
    assert_eq!(read(&out, "delta.csv").lines().count(), 17);
}

#[test]
fn usage_errors_exit_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o_str = out.to_str().unwrap();
    for args in [
        vec!["no-such-command"],
        vec!["delta", "--bogus", "1"],
        vec!["delta", "--max", "5", "--out", o_str],
        vec!["delta", "--r", "0", "--max", "5", "--out", o_str],
        vec!["approx-error", "--r", "4,x", "--out", o_str],
        vec!["train-tmaze", "--mechanism", "transformer", "--out", o_str],
        vec!["train-tmaze", "--gating", "sometimes", "--out", o_str],
        vec!["bench-latency", "--reps", "3", "--out", o_str],
    ] {
        let o = galite(&args);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"), "{args:?}");
        assert!(!out.exists(), "{args:?} left outputs behind");
    }
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(code(&galite(&["--help"])), 0);
    assert_eq!(code(&galite(&["--version"])), 0);
    assert_eq!(code(&galite(&["train-tmaze", "--help"])), 0);
}

#[test]
fn missing_config_file_is_usage_error() {
    let o = galite(&["delta", "--config", "/nonexistent/galite.toml"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "r = 3\nmax = 2\nseed = 4\n").unwrap();
    let out = dir.path().join("run");
    let o = galite(&["delta", "--config", cfg.to_str().unwrap(), "--max", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest["settings"]["r"], "3");
    assert_eq!(manifest["settings"]["max"], "4");
    assert_eq!(manifest["seed"], 4);
    assert_eq!(read(&out, "delta.csv").lines().count(), 26);
}

#[test]
fn config_rejects_nested_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nlr = 1\n").unwrap();
    assert_eq!(code(&galite(&["delta", "--r", "2", "--max", "2", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn bench_ops_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = galite(&["bench-ops", "--d", "8", "--d-h", "4", "--t", "1,10", "--memory", "4,8", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(dir.path(), "opcounts.csv");
    assert!(csv.contains("agalite") && csv.contains("windowed"));
}

#[test]
fn short_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = galite(&[
        "train-tmaze", "--seed", "1", "--corridor", "2", "--steps", "512", "--rollout", "16", "--envs", "2",
        "--d", "8", "--d-h", "4", "--layers", "1", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = read(dir.path(), "train_log.csv");
    assert_eq!(log.lines().count(), 1 + 512 / 32);
    assert!(!read(dir.path(), "checkpoint.txt").is_empty());
}

#[test]
fn ablation_subset() {
    let dir = tempfile::tempdir().unwrap();
    let o = galite(&[
        "ablate", "--runs", "2", "--variants", "base,gating-off", "--corridor", "2", "--steps", "256",
        "--rollout", "16", "--envs", "2", "--d", "8", "--d-h", "4", "--layers", "1", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(dir.path(), "ablation.csv").lines().count(), 1 + 4);
    let unknown = galite(&["ablate", "--variants", "base,nope", "--steps", "64"]);
    assert_eq!(code(&unknown), 2);
}
