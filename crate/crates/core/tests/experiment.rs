mod common;

use std::path::Path;

use common::scenario;
use insider_adp::experiment::{self, analyze, load_artifacts, RunOptions, RunReport, REPORT, TRACKING, TRAJECTORY};
use insider_adp::scenario::{bundled, parse_scenario, Scenario};
use insider_adp::Error;

const ORACLE: RunOptions = RunOptions {
    oracle: true,
    strict_dwell: false,
};

fn run_in(sc: &Scenario, dir: &Path) -> RunReport {
    experiment::run(sc, ORACLE, dir).unwrap()
}

fn variant(edit: impl Fn(&str) -> String) -> Scenario {
    let text = edit(bundled("lane_change_3mode_dt10").unwrap());
    parse_scenario(&text, "variant").unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let sc = scenario("single_adversarial");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_in(&sc, a.path());
    run_in(&sc, b.path());
    for file in [
        TRAJECTORY,
        "gains.json",
        "schedule.json",
        "phases.json",
        "spacing_comparison.csv",
        TRACKING,
    ] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }
}

#[test]
fn report_is_a_function_of_the_artifacts() {
    let sc = scenario("lane_change_3mode_dt10");
    let dir = tempfile::tempdir().unwrap();
    let report = run_in(&sc, dir.path());
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(REPORT)).unwrap()).unwrap();
    let again = analyze(&sc, &load_artifacts(dir.path()).unwrap(), true).unwrap();
    assert_eq!(serde_json::to_value(&again).unwrap(), on_disk);
    assert_eq!(again, report);

    assert_eq!(report.intervals.len(), 3);
    assert!(report.min_phases_per_interval >= 2);
    assert!(report.spacing.above_floor == Some(true) || report.spacing.min > 30.0);
    let oracle = report.oracle.as_ref().unwrap();
    assert!(oracle.max_gain_error < 5e-2);
    assert!(oracle.post_switch_decay.holds);
    assert!(report.phases.iter().all(|p| !p.mixed));
}

#[test]
fn missing_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_artifacts(dir.path()).unwrap_err();
    assert!(matches!(err, Error::MissingArtifacts(_)), "{err:?}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn identical_consecutive_modes_have_no_perturbation() {
    let sc = variant(|t| {
        t.replace("[0.225, 0.30, -1.80]", "[0.240, 0.35, -1.60]")
            .replace("d = [0.0, 0.0, 30.0]", "d = [0.0, 0.0, 25.0]")
    });
    assert_eq!(sc.mode(2).unwrap().a_aug, sc.mode(3).unwrap().a_aug);
    let dir = tempfile::tempdir().unwrap();
    let report = run_in(&sc, dir.path());
    let mixed = &report.oracle.unwrap().mixed_mode;
    let pair = mixed.iter().find(|p| (p.from_mode, p.to_mode) == (2, 3)).unwrap();
    assert_eq!(pair.report.perturbation_norm, 0.0);
    // The margin gamma of these closed loops is not positive, so even a zero
    // perturbation cannot satisfy the strict hypothesis.
    assert_eq!(pair.report.mixed_hypothesis, pair.report.gamma > 0.0);
    assert_eq!(pair.report.mu2_star, pair.report.mu2_mixed);
    let first = mixed.iter().find(|p| p.from_mode == 1).unwrap();
    assert!(first.report.perturbation_norm > 0.0);
    assert!(first.report.mu2_mixed <= first.report.mu2_star + first.report.perturbation_norm + 1e-12);
}

#[test]
fn switch_inside_a_collection_window_is_consumed() {
    let sc = variant(|t| {
        t.replace(
            "{ t = 24.0, mode = 2 }, { t = 48.0, mode = 3 }",
            "{ t = 25.0, mode = 2 }, { t = 49.0, mode = 3 }",
        )
    });
    let dir = tempfile::tempdir().unwrap();
    let report = run_in(&sc, dir.path());
    let hit = report
        .phases
        .iter()
        .find(|p| p.t_start < 25.0 && p.t_end > 25.0)
        .expect("a phase spans the switch");
    assert!(hit.mixed);
    // The next clean phase in the same mode repairs the gain.
    let repaired = report
        .phases
        .iter()
        .find(|p| p.t_start > hit.t_end && p.mode == 2 && !p.mixed)
        .unwrap();
    assert!(repaired.gain_error.unwrap() < 5e-2);
    assert!(report.spacing.min > 30.0);
}

#[test]
fn strict_dwell_rejects_unproven_schedules() {
    let sc = scenario("single_adversarial");
    let dir = tempfile::tempdir().unwrap();
    let err = experiment::run(
        &sc,
        RunOptions {
            oracle: false,
            strict_dwell: true,
        },
        dir.path(),
    )
    .unwrap_err();
    assert_eq!(err.kind(), "infeasible_schedule");
    assert_eq!(err.exit_code(), 2);
}
