use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    Command::new(env!("CARGO_BIN_EXE_genmatch"))
        .args(args)
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap()
}

#[test]
fn simulate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate"], r#"{"command": "simulate", "sim": {"n_steps": 20, "n_samples": 1000}}"#);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let listed = String::from_utf8(o.stdout).unwrap();
    for f in ["samples.csv", "metrics.json", "resolved_config.json"] {
        assert!(listed.contains(f), "{listed}");
        assert!(dir.path().join("out").join(f).exists());
    }
}

#[test]
fn unknown_key_is_a_config_error_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate"], "{\n  \"command\": \"simulate\",\n  \"n_stepz\": 3\n}");
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("n_stepz") && err.contains("line 3"), "{err}");
}

#[test]
fn command_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train"], r#"{"command": "simulate"}"#);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate"], r#"{"command": "simulate", "sim": {"n_steps": 1, "n_samples": 10}}"#);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn failed_verification_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"command": "verify-kfe", "verify": {"pairs": ["condot_flow"], "times": [0.5], "endpoints": [0.0], "control_factor": 1e30}}"#;
    let o = run(dir.path(), &["verify-kfe"], cfg);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(dir.path().join("out/kfe_report.json")).unwrap();
    assert!(report.contains("\"all_pass\": false"));
}
