use std::path::{Path, PathBuf};

use insider_adp::scenario::{bundled, load_scenario, parse_scenario, BUNDLED};
use insider_adp::Error;

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn lane_change_text() -> String {
    std::fs::read_to_string(scenario_dir().join("lane_change_3mode_dt10.toml")).unwrap()
}

#[test]
fn files_on_disk_match_the_bundled_copies() {
    for (name, text) in BUNDLED {
        let disk = std::fs::read_to_string(scenario_dir().join(format!("{name}.toml"))).unwrap();
        assert_eq!(&disk, text, "{name}");
        let sc = load_scenario(&scenario_dir().join(format!("{name}.toml"))).unwrap();
        assert_eq!(&sc.name, name);
    }
    assert!(load_scenario(Path::new("lane_change_3mode_dt8")).is_ok());
}

#[test]
fn lane_change_parameters_load() {
    for (name, dt) in [("lane_change_3mode_dt10", 10.0), ("lane_change_3mode_dt8", 8.0)] {
        let sc = parse_scenario(bundled(name).unwrap(), name).unwrap();
        assert_eq!(sc.modes.len(), 3);
        assert_eq!(sc.signal.dwell_min(), 24.0);
        assert_eq!(sc.learner.tau, 0.1);
        assert_eq!(sc.learner.delta_tau, 0.02);
        assert_eq!(sc.learner.inter_learning_interval, dt);
        assert_eq!((sc.n, sc.s, sc.m, sc.q()), (3, 1, 1, 4));
        let ids: Vec<u32> = sc.signal.events().iter().map(|e| e.mode).collect();
        assert_eq!(ids, [1, 2, 3]);
        let d1 = &sc.mode(1).unwrap().d_bar;
        assert_eq!(d1.as_slice(), &[0.0, 0.0, 18.0, -73.0]);
    }
}

#[test]
fn out_of_order_events_are_rejected() {
    let text = lane_change_text().replace("{ t = 48.0, mode = 3 }", "{ t = 12.0, mode = 3 }");
    let err = parse_scenario(&text, "bad").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let Error::Validation(problems) = err else {
        panic!("expected validation error")
    };
    assert!(
        problems.iter().any(|p| p.contains("t = 24") && p.contains("t = 12")),
        "{problems:?}"
    );
}

#[test]
fn mismatched_input_matrix_is_rejected() {
    let b1 = "B1 = [[0.0], [1.0], [0.0]]\nd = [0.0, 0.0, 25.0]";
    assert!(lane_change_text().contains(b1));
    let text = lane_change_text().replace(b1, "B1 = [[0.0], [1.0]]\nd = [0.0, 0.0, 25.0]");
    let err = parse_scenario(&text, "bad").unwrap_err();
    assert_eq!(err.kind(), "validation_error");
    assert!(err.to_string().contains("B1"), "{err}");
}

#[test]
fn syntax_errors_report_the_line() {
    let text = lane_change_text().replace("tau = 0.1", "tau = = 0.1");
    let line = text.lines().position(|l| l.contains("tau = = 0.1")).unwrap() + 1;
    let err = parse_scenario(&text, "bad.toml").unwrap_err();
    assert_eq!(err.kind(), "parse_error");
    assert!(err.to_string().contains(&format!("bad.toml:{line}:")), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_scenario(Path::new("/nonexistent/scenario.toml")).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}
