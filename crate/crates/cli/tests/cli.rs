use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn flexsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexsel"))
        .args(args)
        .output()
        .expect("spawn flexsel")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn profile_recovers_planted_peak() {
    let dir = tempfile::tempdir().unwrap();
    let out = flexsel(&["profile", "--out", dir.path().to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc = read_json(&dir.path().join("profile.json"));
    assert_eq!(doc["reference_layer"], 5);
    assert_eq!(doc["seed"], 0);
    assert_eq!(doc["config_hash"].as_str().unwrap().len(), 64);

    let csv = std::fs::read_to_string(dir.path().join("recall.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# seed=0 config_hash="));
    assert_eq!(lines.next().unwrap(), "layer,recall,K,is_reference");
    assert_eq!(lines.count(), 8);
}

#[test]
fn flops_reports_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let query = serde_json::json!({ "flops": {
        "layers": 28, "reference_layer": 19, "heads": 28, "hidden": 3584, "ffn": 18944,
        "tokens": 1_000_000, "selected": 62_500, "sets": 8,
        "selector_layers": 2, "selector_hidden": 32, "selector_ffn": 64
    }});
    std::fs::write(&cfg, query.to_string()).unwrap();
    let out = flexsel(&[
        "flops",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    let report = &stdout["report"];
    assert!((report["ratio_approx"].as_f64().unwrap() - 19.0 / 224.0).abs() < 1e-12);
    // the exact ratio approaches the approximation from above at large n
    let exact = report["ratio_exact"].as_f64().unwrap();
    assert!(exact > 19.0 / 224.0 && exact < 0.11, "{exact}");
    let file = read_json(&dir.path().join("o").join("flops.json"));
    assert_eq!(file["report"], *report);
}

#[test]
fn seed_flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 3}"#).unwrap();
    let out_dir = dir.path().join("o");
    let out = flexsel(&[
        "flops",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "8",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let echoed = read_json(&out_dir.join("config.json"));
    assert_eq!(echoed["seed"], 8);
    assert_eq!(echoed["selector"]["seed"], 8);
    assert_eq!(read_json(&out_dir.join("flops.json"))["seed"], 8);
}

#[test]
fn select_with_timing_writes_separate_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"select": {"frames": 16, "timing_reps": 5}}"#).unwrap();
    let out = flexsel(&[
        "select",
        "--timing",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sel = read_json(&dir.path().join("selection.json"));
    assert_eq!(sel["needle_recall"], 1.0);
    assert_eq!(sel["selected"].as_array().unwrap().len(), 8);
    let timing = read_json(&dir.path().join("timing.json"));
    assert_eq!(timing["repetitions"], 5);
    assert!(timing["stage1_ms_median"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unknown_command_is_usage_error() {
    let out = flexsel(&["bogus", "--json-errors"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["code"], "usage");
}

#[test]
fn invalid_config_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": "not a number"}"#).unwrap();
    let out = flexsel(&[
        "gen",
        "--json-errors",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["code"], "config");
    assert!(out.stdout.is_empty());
}

#[test]
fn eval_without_weights_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = flexsel(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs selector weights"));
}

#[test]
fn corrupt_weights_report_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("bad.flxs");
    std::fs::write(&w, b"FLXS\x01\x00").unwrap();
    let out = flexsel(&[
        "select",
        "--json-errors",
        "--weights",
        w.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["code"], "format");
}
