use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use insider_adp::experiment::{self, RunOptions, RunReport};
use insider_adp::scenario::{load_scenario, Scenario, BUNDLED};
use insider_adp::Error;
use serde_json::json;

const ERROR_FILE: &str = "error.json";

/// Periodic off-policy learning against a switching insider.
#[derive(Parser)]
#[command(name = "insider-adp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts and report.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the exploration-noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Analyze against the true mode matrices.
        #[arg(long)]
        oracle: bool,
        /// Fail when the dwell-time condition is violated.
        #[arg(long)]
        strict_dwell: bool,
    },
    /// Recompute the report from the artifacts in `--out`.
    Analyze {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oracle: bool,
    },
    /// Parse and validate a scenario.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// List the bundled scenarios.
    ListScenarios,
}

fn summary(sc: &Scenario) -> serde_json::Value {
    json!({
        "name": sc.name,
        "description": sc.description,
        "n": sc.n,
        "s": sc.s,
        "m": sc.m,
        "modes": sc.modes.iter().map(|m| json!({"id": m.mode_id, "label": m.label})).collect::<Vec<_>>(),
        "events": sc.signal.events(),
        "dwell_min": sc.signal.dwell_min(),
        "tau": sc.learner.tau,
        "delta_tau": sc.learner.delta_tau,
        "inter_learning_interval": sc.learner.inter_learning_interval,
        "t_end": sc.sim.t_end,
        "seed": sc.noise.seed,
    })
}

fn execute(cmd: Command) -> Result<serde_json::Value, Error> {
    match cmd {
        Command::Run {
            scenario,
            seed,
            out,
            oracle,
            strict_dwell,
        } => {
            let mut sc = load_scenario(&scenario)?;
            if let Some(s) = seed {
                sc = sc.with_seed(s);
            }
            let opts = RunOptions {
                oracle: oracle || sc.analysis.oracle,
                strict_dwell,
            };
            let result = experiment::run(&sc, opts, &out).and_then(require_convergence);
            // Best effort: the out directory may be the problem.
            let _ = match &result {
                Err(e) => std::fs::create_dir_all(&out)
                    .and_then(|_| std::fs::write(out.join(ERROR_FILE), error_json(e).to_string())),
                Ok(_) => std::fs::remove_file(out.join(ERROR_FILE)),
            };
            Ok(serde_json::to_value(result?).expect("report serializes"))
        }
        Command::Analyze { scenario, out, oracle } => {
            let sc = load_scenario(&scenario)?;
            let art = experiment::load_artifacts(&out)?;
            let report = experiment::analyze(&sc, &art, oracle || sc.analysis.oracle)?;
            Ok(serde_json::to_value(report).expect("report serializes"))
        }
        Command::Validate { scenario } => {
            let sc = load_scenario(&scenario)?;
            Ok(json!({"valid": true, "scenario": summary(&sc)}))
        }
        Command::ListScenarios => Ok(json!(BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>())),
    }
}

/// Artifacts and the report stay on disk, but a stalled learning phase
/// fails the run.
fn require_convergence(report: RunReport) -> Result<RunReport, Error> {
    match report.phases.iter().find(|p| !p.converged) {
        None => Ok(report),
        Some(p) => Err(Error::NoConvergence {
            iterations: p.iterations,
            residual: p.final_residual,
            trace: Vec::new(),
        }),
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = json!({"error": {"kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()}});
    if let Error::Validation(problems) = e {
        v["error"]["problems"] = json!(problems);
    }
    v
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(v) => {
            let mut out = std::io::stdout().lock();
            // A closed pipe downstream is not a failure of the run.
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
