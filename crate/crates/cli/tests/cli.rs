use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mocap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mocap")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// A small dataset with enough frames for the occlusion floor to place gaps.
fn dataset(dir: &Path) -> String {
    let config = path(dir, "config.json");
    std::fs::write(&config, r#"{"synth": {"n_frames": 600, "n_sequences": 1}}"#).unwrap();
    let out = mocap(&["--config", &config, "generate", "--out", &path(dir, "data"), "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    config
}

#[test]
fn eval_of_identical_inputs_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let motion = path(dir.path(), "data/seq_000_motion.json");
    let out = mocap(&["eval", "--pred", &motion, "--truth", &motion, "--out", &path(dir.path(), "m.json")]);
    assert!(out.status.success());
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(metrics["joe"].as_f64(), Some(0.0));
    assert_eq!(metrics["jpe"].as_f64(), Some(0.0));

    let seq = path(dir.path(), "data/seq_000_clean.json");
    let out = mocap(&["eval", "--pred", &seq, "--truth", &seq, "--out", &path(dir.path(), "o.json")]);
    assert!(out.status.success());
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o.json")).unwrap()).unwrap();
    assert_eq!(metrics["ompe"].as_f64(), Some(0.0));
}

#[test]
fn cleaning_a_clean_sequence_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = dataset(dir.path());
    let input = path(dir.path(), "data/seq_000_clean.json");
    let cleaned = path(dir.path(), "cleaned.json");
    let report = path(dir.path(), "report.json");
    let out = mocap(&["--config", &config, "clean", "--input", &input, "--out", &cleaned, "--report", &report]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&cleaned).unwrap());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["fill"]["fills"].as_array().map(Vec::len), Some(0));
    assert_eq!(report["outliers"]["events"].as_array().map(Vec::len), Some(0));
    assert_eq!(report["repaired"].as_array().map(Vec::len), Some(0));
}

#[test]
fn success_lists_outputs() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let out = mocap(&["stats", "--input", &path(dir.path(), "data"), "--out", &path(dir.path(), "stats")]);
    assert!(out.status.success());
    let json = stdout_json(&out);
    assert_eq!(json["command"], "stats");
    for p in json["outputs"].as_array().unwrap() {
        assert!(Path::new(p.as_str().unwrap()).is_file());
    }
}

#[test]
fn missing_input_reports_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mocap(&["clean", "--input", &path(dir.path(), "absent.json"), "--out", &path(dir.path(), "x.json")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error"]["kind"], "io");
    assert!(!out.stderr.is_empty());
}

#[test]
fn stochastic_commands_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = mocap(&["generate", "--out", &path(dir.path(), "data")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error"]["kind"], "invalid");
    assert!(!dir.path().join("data").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = path(dir.path(), "config.json");
    std::fs::write(&config, r#"{"seed": 1, "fil_k": 4}"#).unwrap();
    let out = mocap(&["--config", &config, "generate", "--out", &path(dir.path(), "data")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error"]["kind"], "parse");
}

#[test]
fn usage_errors_exit_with_two() {
    let out = mocap(&["clean", "--input"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["error"]["kind"], "usage");
    assert!(mocap(&["--help"]).status.success());
}

#[test]
fn solve_rejects_a_model_for_another_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = path(dir.path(), "config.json");
    std::fs::write(
        &config,
        r#"{"synth": {"n_frames": 600, "n_sequences": 1},
            "solver": {"global_width": 8, "joint_width": 4, "local_width": 4, "marker_width": 4},
            "solver_train": {"steps": 2, "batch_size": 4}}"#,
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = mocap(&[&["--config", config.as_str()], args].concat());
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stdout));
    };
    run(&["generate", "--out", &path(dir.path(), "data"), "--seed", "1"]);
    run(&["train", "solver", "--dataset", &path(dir.path(), "data"), "--out", &path(dir.path(), "solver.json"), "--log", &path(dir.path(), "log.csv"), "--seed", "1"]);

    let hand = path(dir.path(), "hand.json");
    std::fs::write(&hand, r#"{"synth": {"n_frames": 600, "n_sequences": 1, "kind": "hand"}}"#).unwrap();
    let out = mocap(&["--config", &hand, "generate", "--out", &path(dir.path(), "hand"), "--seed", "1"]);
    assert!(out.status.success());
    let out = mocap(&[
        "solve",
        "--input",
        &path(dir.path(), "hand/seq_000_clean.json"),
        "--model",
        &path(dir.path(), "solver.json"),
        "--out",
        &path(dir.path(), "motion.json"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error"]["kind"], "mismatch");
}
