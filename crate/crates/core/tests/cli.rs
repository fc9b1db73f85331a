use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twoscale")).args(args).output().expect("binary runs")
}

fn report_without_timings(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value.as_object_mut().unwrap().remove("timings");
    value
}

#[test]
fn missing_config_is_an_error() {
    let out = run(&["experiment", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.json") && stderr.contains("No such file"), "{stderr}");
}

#[test]
fn validate_reference_model() {
    for name in ["reference_fast.json", "reference_model.json", "symmetric_queue.json"] {
        let path = configs().join(name);
        let out = run(&["validate", "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}");
    }
}

#[test]
fn validate_flags_a_broken_generator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"m0": 2, "terms": [{"coeff": [[-1, 1], [1, -2]], "time_poly": [1]}]}"#).unwrap();
    let out = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_print_the_schema() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eps_grid"));
    let out = run(&["experiment"]);
    assert_eq!(out.status.code(), Some(64));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn thread_count_does_not_change_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("queue_demo.json");
    let mut reports = Vec::new();
    for threads in ["1", "8"] {
        let out_dir = dir.path().join(threads);
        let out = run(&[
            "experiment",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "99",
            "--threads",
            threads,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
        reports.push(report_without_timings(&out_dir));
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0]["environment"]["seed"], 99);
}

#[test]
fn threshold_failure_exits_two_and_csv_has_the_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("strict.json");
    std::fs::write(
        &path,
        r#"{"kind": "expansion_error", "model": {"type": "reference"}, "eps_grid": [0.1, 0.05, 0.02],
            "thresholds": {"max_error": {"upper": 1e-6}}}"#,
    )
    .unwrap();
    let out = run(&["experiment", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(2));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epsilon,metric,value,stderr"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn analyze_expand_and_simulate_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("reference_model.json");
    let out_dir = dir.path().to_str().unwrap();
    for (cmd, format, file) in [
        ("analyze", "json", "analysis.json"),
        ("analyze", "csv", "analysis.csv"),
        ("expand", "json", "expansion.json"),
        ("simulate", "json", "simulation.json"),
        ("simulate", "csv", "paths.csv"),
    ] {
        let out = run(&[cmd, "--config", config.to_str().unwrap(), "--out", out_dir, "--format", format]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let analysis: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("analysis.json")).unwrap()).unwrap();
    assert_eq!(analysis["t"].as_array().unwrap().len(), 101);
    assert!(analysis["variance"]["cumulative"].is_array());
    let paths = std::fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert!(paths.starts_with("rep,jump_index,time,state\n0,0,0,2\n"));
}
