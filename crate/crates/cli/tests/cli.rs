use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_insider-adp"))
}

fn scenario_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"))
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn list_scenarios_names_the_bundled_files() {
    let out = run(&["list-scenarios"]);
    assert!(out.status.success());
    let names = json(&out.stdout);
    for name in ["single_adversarial", "lane_change_3mode_dt10", "lane_change_3mode_dt8"] {
        assert!(names.as_array().unwrap().iter().any(|n| n == name), "{name}");
    }
}

#[test]
fn validate_summarizes_a_scenario() {
    let path = scenario_file("lane_change_3mode_dt8");
    let out = run(&["validate", "--scenario", path.to_str().unwrap()]);
    assert!(out.status.success());
    let v = json(&out.stdout);
    assert_eq!(v["valid"], true);
    assert_eq!(v["scenario"]["inter_learning_interval"], 8.0);
    assert_eq!(v["scenario"]["modes"].as_array().unwrap().len(), 3);
}

#[test]
fn invalid_scenario_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario_file("lane_change_3mode_dt10"))
        .unwrap()
        .replace("{ t = 48.0, mode = 3 }", "{ t = 30.0, mode = 3 }");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = run(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = json(&out.stderr);
    assert_eq!(err["error"]["kind"], "validation_error");
    assert!(err["error"]["problems"][0].as_str().unwrap().contains("dwell_min"));
}

#[test]
fn run_then_analyze_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let o = out_dir.to_str().unwrap();
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join("error.json"), "stale").unwrap();
    let out = run(&[
        "run",
        "--scenario",
        "single_adversarial",
        "--out",
        o,
        "--oracle",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out.stdout);
    assert_eq!(report["seed"], 3);
    assert!(!out_dir.join("error.json").exists());
    for f in [
        "trajectory.csv",
        "gains.json",
        "schedule.json",
        "phases.json",
        "run.json",
        "report.json",
    ] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let header = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert!(header.starts_with("t,xi_1,xi_2,xi_3,xi_4,u_1,mode\n"));

    let again = run(&["analyze", "--scenario", "single_adversarial", "--out", o, "--oracle"]);
    assert!(again.status.success());
    assert_eq!(json(&again.stdout), report);
    assert_eq!(json(&std::fs::read(out_dir.join("report.json")).unwrap()), report);
}

#[test]
fn strict_dwell_failure_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = run(&[
        "run",
        "--scenario",
        "lane_change_3mode_dt10",
        "--out",
        o,
        "--strict-dwell",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = json(&out.stderr);
    assert_eq!(err["error"]["kind"], "infeasible_schedule");
    assert_eq!(json(&std::fs::read(dir.path().join("error.json")).unwrap()), err);
}

#[test]
fn missing_inputs_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("nothing");
    let out = run(&[
        "analyze",
        "--scenario",
        "single_adversarial",
        "--out",
        o.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(json(&out.stderr)["error"]["kind"], "missing_artifacts");

    let out = run(&["validate", "--scenario", "/no/such/file.toml"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn stalled_learning_fails_the_run_but_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario_file("lane_change_3mode_dt10"))
        .unwrap()
        .replace(
            "{ t = 24.0, mode = 2 }, { t = 48.0, mode = 3 }",
            "{ t = 25.0, mode = 2 }, { t = 49.0, mode = 3 }",
        );
    let path = dir.path().join("mid_window_switch.toml");
    std::fs::write(&path, text).unwrap();
    let o = dir.path().join("out");
    let out = run(&[
        "run",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out.stderr)["error"]["kind"], "no_convergence");
    let report = json(&std::fs::read(o.join("report.json")).unwrap());
    let stalled: Vec<&Value> = report["phases"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["converged"] == false)
        .collect();
    assert!(!stalled.is_empty());
    assert!(stalled.iter().all(|p| p["mixed"] == true));
}
