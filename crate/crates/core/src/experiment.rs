//! Experiment orchestration: run a scenario, persist its artifacts, and
//! compute the report from those artifacts alone.
//!
//! Artifacts written to the output directory:
//!
//! | file | content |
//! |------|---------|
//! | `trajectory.csv` | `t,xi_1..xi_q,u_1..u_m,mode` on the simulation grid |
//! | `gains.json` | every policy iterate `{phase, k, P, K, residual}` |
//! | `schedule.json` | constant-policy segments `{phase, t_start, t_end, gain}` |
//! | `phases.json` | one record per learning phase |
//! | `run.json` | scenario name, seed, wall-clock runtime |
//! | `report.json` | [`RunReport`] |
//! | `spacing_comparison.csv` | `t,run,learned,initial[,cooperative]`: first state under each policy |
//! | `tracking_error.csv` | `t,mode,error,bound` (oracle analysis only) |

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::adp::{
    dwell_feasibility, mixed_mode_safety_check, run_schedule, trajectory_bound, DwellFeasibility, LearningPhase,
    MixedModeReport, PhaseIterate, Segment, TrajectoryBound,
};
use crate::augment::{equilibrium, AugmentedMode};
use crate::error::{Error, Result};
use crate::linalg::{log_norm_2, lqr_oracle, spectral_norm, GainMatrix, SymMatrix};
use crate::scenario::Scenario;
use crate::sim::{simulate, ExplorationNoise, Policy, SimConfig, TrajectoryLog};

pub const TRAJECTORY: &str = "trajectory.csv";
pub const GAINS: &str = "gains.json";
pub const SCHEDULE: &str = "schedule.json";
pub const PHASES: &str = "phases.json";
pub const RUN_INFO: &str = "run.json";
pub const REPORT: &str = "report.json";
pub const SPACING: &str = "spacing_comparison.csv";
pub const TRACKING: &str = "tracking_error.csv";

/// Threshold on `e(t_end) / e(t_J)` after the final switch.
pub const TERMINAL_RATIO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub oracle: bool,
    pub strict_dwell: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub scenario: String,
    pub seed: u64,
    pub runtime_s: f64,
}

/// Everything a run leaves on disk, in memory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub log: TrajectoryLog,
    pub iterates: Vec<PhaseIterate>,
    pub segments: Vec<Segment>,
    pub phases: Vec<LearningPhase>,
    pub info: RunInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub windows: usize,
    pub rank: usize,
    pub iterations: usize,
    pub final_residual: f64,
    /// `false` when the iteration stalled at `max_policy_iters`.
    pub converged: bool,
    /// Mode active when the last window closed.
    pub mode: u32,
    /// The batch spans a mode switch.
    pub mixed: bool,
    /// `||K - K*||_F / ||K*||_F` against the mode active at the phase end.
    pub gain_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub index: usize,
    pub mode: u32,
    pub t_start: f64,
    pub t_end: f64,
    /// Learning phases lying entirely inside the interval.
    pub completed_phases: usize,
    /// `|C x - x_d|` at the last sample of the interval.
    pub output_error_end: f64,
    pub first_state_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacingSummary {
    pub min: f64,
    pub final_value: f64,
    pub safety_floor: Option<f64>,
    pub above_floor: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellRecord {
    pub zeta_max_measured: f64,
    pub zeta_max_declared: Option<f64>,
    pub within_declared: bool,
    pub omega_min: f64,
    pub delta_t: f64,
    /// Present when the oracle constants admit the test (`gamma_min > 0`).
    pub feasibility: Option<DwellFeasibility>,
    pub feasible: Option<bool>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeOracle {
    pub mode: u32,
    pub gain: GainMatrix,
    #[serde(rename = "P")]
    pub p: SymMatrix,
    /// `-mu_2(A - B K*)`.
    pub gamma: f64,
    #[serde(with = "crate::linalg::vector")]
    pub reference: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionStep {
    pub j: usize,
    pub v_j: f64,
    pub v_next: f64,
    pub c_r: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub c1: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchedBoundCheck {
    pub constants: TrajectoryBound,
    /// Effective optimal dwell `t_{j+1} - s_j` per switch.
    pub effective_dwell: Vec<f64>,
    pub recursion: Vec<RecursionStep>,
    pub recursion_holds: bool,
    pub initial_error: f64,
    /// Largest `e(t) / ((1 + slack) * bound(t))` on the grid; `None` when
    /// the recursion does not contract and the bound is void.
    pub worst_bound_ratio: Option<f64>,
    pub pointwise_holds: bool,
    pub fitted: Fit,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    pub t_final_switch: f64,
    pub error_at_switch: f64,
    pub terminal_error: f64,
    pub ratio: f64,
    pub fitted: Fit,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPair {
    pub from_mode: u32,
    pub to_mode: u32,
    pub report: MixedModeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAnalysis {
    pub modes: Vec<ModeOracle>,
    /// Over phases whose batch lies in a single mode.
    pub max_gain_error: f64,
    pub final_gain_error: f64,
    pub switched_bound: SwitchedBoundCheck,
    pub post_switch_decay: DecayCheck,
    pub mixed_mode: Vec<MixedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub policy: String,
    pub final_value: f64,
    pub min: f64,
    pub first_below_floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub runtime_s: f64,
    pub q: usize,
    pub m: usize,
    pub phases: Vec<PhaseSummary>,
    pub intervals: Vec<IntervalSummary>,
    pub min_phases_per_interval: usize,
    pub spacing: SpacingSummary,
    pub dwell: DwellRecord,
    pub oracle: Option<OracleAnalysis>,
    pub comparison: Vec<PolicyOutcome>,
}

/// Runs the scenario and writes all artifacts under `out_dir`.
pub fn run(sc: &Scenario, opts: RunOptions, out_dir: &Path) -> Result<RunReport> {
    if opts.strict_dwell {
        precheck_dwell(sc)?;
    }
    let started = Instant::now();
    let outcome = run_schedule(
        &sc.modes,
        &sc.signal,
        &sc.sim,
        &sc.learner,
        &sc.cost,
        &sc.noise,
        &sc.initial_gain,
    )?;
    let info = RunInfo {
        scenario: sc.name.clone(),
        seed: sc.noise.seed,
        runtime_s: started.elapsed().as_secs_f64(),
    };
    let art = Artifacts {
        log: outcome.log,
        iterates: outcome.iterates,
        segments: outcome.segments,
        phases: outcome.phases,
        info,
    };
    std::fs::create_dir_all(out_dir)?;
    write_artifacts(out_dir, &art)?;
    let comparison = comparison_columns(sc, &art)?;
    write_comparison(&out_dir.join(SPACING), &art.log, sc.sim.step, &comparison)?;

    let art = load_artifacts(out_dir)?;
    let report = analyze(sc, &art, opts.oracle)?;
    if opts.strict_dwell {
        if let Some(false) = report.dwell.feasible {
            return Err(Error::InfeasibleSchedule(
                report
                    .dwell
                    .note
                    .clone()
                    .unwrap_or_else(|| "dwell condition violated".into()),
            ));
        }
        if !report.dwell.within_declared {
            return Err(Error::InfeasibleSchedule(format!(
                "measured learning duration {:.4} s exceeds declared zeta_max",
                report.dwell.zeta_max_measured
            )));
        }
    }
    write_json(&out_dir.join(REPORT), &report)?;
    if opts.oracle {
        write_tracking(&out_dir.join(TRACKING), sc, &art, &report)?;
    }
    Ok(report)
}

/// Dwell test before running, with the nominal learning duration
/// `tau + p_min * delta_tau` unless a bound is declared.
fn precheck_dwell(sc: &Scenario) -> Result<()> {
    let oracles = mode_oracles(sc)?;
    let zeta = sc
        .learner
        .zeta_max
        .unwrap_or(sc.learner.tau + sc.learner.p_min as f64 * sc.learner.delta_tau);
    let rec = dwell_record(sc, &oracles, zeta);
    match rec.feasible {
        Some(false) | None => Err(Error::InfeasibleSchedule(
            rec.note.unwrap_or_else(|| "dwell condition violated".into()),
        )),
        Some(true) => Ok(()),
    }
}

pub fn write_artifacts(dir: &Path, art: &Artifacts) -> Result<()> {
    let f = BufWriter::new(File::create(dir.join(TRAJECTORY))?);
    art.log.write_csv(f)?;
    write_json(&dir.join(GAINS), &art.iterates)?;
    write_json(&dir.join(SCHEDULE), &art.segments)?;
    write_json(&dir.join(PHASES), &art.phases)?;
    write_json(&dir.join(RUN_INFO), &art.info)
}

pub fn load_artifacts(dir: &Path) -> Result<Artifacts> {
    let path = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifacts(p.display().to_string()))
        }
    };
    let traj = path(TRAJECTORY)?;
    let gains = path(GAINS)?;
    let schedule = path(SCHEDULE)?;
    let phases = path(PHASES)?;
    let info = path(RUN_INFO)?;
    let log = TrajectoryLog::read_csv(BufReader::new(File::open(traj)?))?;
    Ok(Artifacts {
        log,
        iterates: read_json(&gains)?,
        segments: read_json(&schedule)?,
        phases: read_json(&phases)?,
        info: read_json(&info)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(f)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = BufReader::new(File::open(path)?);
    serde_json::from_reader(f).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Oracle gain, value matrix, margin and reference for every active mode.
pub fn mode_oracles(sc: &Scenario) -> Result<Vec<ModeOracle>> {
    sc.active_modes()
        .into_iter()
        .map(|md| {
            let sol = lqr_oracle(&md.a_aug, &md.b_aug, &sc.cost.q, &sc.cost.r)?;
            let gamma = -log_norm_2(&md.closed_loop(&sol.k));
            let reference = equilibrium(md, &sol.k)?;
            Ok(ModeOracle {
                mode: md.mode_id,
                gain: sol.k,
                p: sol.p,
                gamma,
                reference,
            })
        })
        .collect()
}

fn dwell_record(sc: &Scenario, oracles: &[ModeOracle], zeta_measured: f64) -> DwellRecord {
    let omega_min = sc.signal.dwell_min();
    let delta_t = sc.learner.inter_learning_interval;
    let declared = sc.learner.zeta_max;
    let within_declared = declared.is_none_or(|z| zeta_measured <= z + 1e-9);
    let mut rec = DwellRecord {
        zeta_max_measured: zeta_measured,
        zeta_max_declared: declared,
        within_declared,
        omega_min,
        delta_t,
        feasibility: None,
        feasible: None,
        note: None,
    };
    if oracles.is_empty() {
        return rec;
    }
    let gamma_min = oracles.iter().map(|o| o.gamma).fold(f64::INFINITY, f64::min);
    let ps: Vec<SymMatrix> = oracles.iter().map(|o| o.p.clone()).collect();
    let zeta = declared.unwrap_or(zeta_measured).max(zeta_measured);
    match crate::adp::nu_ratio(&ps).and_then(|nu| dwell_feasibility(gamma_min, nu, zeta, omega_min, delta_t)) {
        Ok(f) => {
            rec.feasible = Some(f.feasible);
            if !f.feasible {
                rec.note = Some(format!("dwell margin {:.4} s is not positive", f.margin));
            }
            rec.feasibility = Some(f);
        }
        Err(e) => {
            rec.feasible = Some(false);
            rec.note = Some(if gamma_min > 0.0 {
                e.to_string()
            } else {
                format!("optimal closed loops have no log-norm margin: gamma_min = {gamma_min:.4e} <= 0")
            });
        }
    }
    rec
}

fn mode_of(sc: &Scenario, id: u32) -> Result<&AugmentedMode> {
    sc.mode(id)
        .ok_or_else(|| Error::Validation(vec![format!("trajectory references unknown mode {id}")]))
}

/// Log row of the last sample strictly before `t`, clamped to the log.
fn row_before(log: &TrajectoryLog, t: f64) -> usize {
    let h = log.step().unwrap_or(1.0);
    let k = ((t - log.t[0]) / h - 0.5).ceil() as i64 - 1;
    k.clamp(0, log.len() as i64 - 1) as usize
}

/// Log row at `t` (nearest grid point), clamped.
fn row_at(log: &TrajectoryLog, t: f64) -> usize {
    log.index_at(t).unwrap_or(if t <= log.t[0] { 0 } else { log.len() - 1 })
}

/// `(t_j, t_{j+1}, mode)` clipped to the logged horizon.
fn logged_intervals(sc: &Scenario, log: &TrajectoryLog) -> Vec<(f64, f64, u32)> {
    let t_end = *log.t.last().expect("non-empty log");
    sc.signal
        .intervals()
        .into_iter()
        .filter(|(a, _, _)| *a < t_end)
        .map(|(a, b, m)| (a, b.min(t_end), m))
        .collect()
}

/// Suffix maximum of `e`, fitted as `c1 e^{-alpha (t - t0)}` relative to
/// `e[0]` by least squares on the logarithm.
pub fn fit_envelope(t: &[f64], e: &[f64]) -> Fit {
    let n = t.len().min(e.len());
    if n < 2 || e[0] <= 0.0 {
        return Fit {
            c1: f64::NAN,
            alpha: f64::NAN,
        };
    }
    let mut env = vec![0.0; n];
    let mut run = 0.0f64;
    for i in (0..n).rev() {
        run = run.max(e[i]);
        env[i] = run;
    }
    let stride = (n / 2000).max(1);
    let (mut sx, mut sy, mut sxx, mut sxy, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in (0..n).step_by(stride) {
        if env[i] <= 0.0 {
            continue;
        }
        let x = t[i] - t[0];
        let y = (env[i] / e[0]).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        cnt += 1.0;
    }
    let denom = cnt * sxx - sx * sx;
    if cnt < 2.0 || denom <= 0.0 {
        return Fit {
            c1: f64::NAN,
            alpha: f64::NAN,
        };
    }
    let slope = (cnt * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / cnt;
    Fit {
        c1: intercept.exp(),
        alpha: -slope,
    }
}

/// Builds the report from the artifacts; with `oracle` the true mode
/// matrices are consulted as well.
pub fn analyze(sc: &Scenario, art: &Artifacts, oracle: bool) -> Result<RunReport> {
    let log = &art.log;
    if log.len() < 2 {
        return Err(Error::MissingArtifacts("trajectory has fewer than two samples".into()));
    }
    let q = log.xi[0].len();
    let m = log.u[0].len();
    if q != sc.q() || m != sc.m {
        return Err(Error::DimensionMismatch(format!(
            "artifacts have q = {q}, m = {m}; scenario has q = {}, m = {}",
            sc.q(),
            sc.m
        )));
    }
    let oracles = if oracle { mode_oracles(sc)? } else { Vec::new() };
    let oracle_for = |id: u32| oracles.iter().find(|o| o.mode == id);

    let mut phases = Vec::with_capacity(art.phases.len());
    for ph in &art.phases {
        let a = row_at(log, ph.t_start);
        let b = row_before(log, ph.t_end);
        let mode = log.mode[b];
        let mixed = log.mode[a..=b].iter().any(|&md| md != mode);
        let gain_error = oracle_for(mode).map(|o| ph.learned_gain.relative_error(&o.gain));
        phases.push(PhaseSummary {
            index: ph.index,
            t_start: ph.t_start,
            t_end: ph.t_end,
            windows: ph.windows,
            rank: ph.rank.achieved,
            iterations: ph.iterations,
            final_residual: ph.final_residual,
            converged: ph.converged,
            mode,
            mixed,
            gain_error,
        });
    }

    let intervals_raw = logged_intervals(sc, log);
    let mut intervals = Vec::new();
    for (j, &(a, b, mode)) in intervals_raw.iter().enumerate() {
        let completed = art
            .phases
            .iter()
            .filter(|p| p.t_start >= a - 1e-9 && p.t_end <= b + 1e-9)
            .count();
        let last = if j + 1 == intervals_raw.len() {
            log.len() - 1
        } else {
            row_before(log, b)
        };
        let out = output_error(mode_of(sc, log.mode[last])?, &log.xi[last]);
        intervals.push(IntervalSummary {
            index: j,
            mode,
            t_start: a,
            t_end: b,
            completed_phases: completed,
            output_error_end: out,
            first_state_end: log.xi[last][0],
        });
    }
    let min_phases_per_interval = intervals.iter().map(|i| i.completed_phases).min().unwrap_or(0);

    let first: Vec<f64> = log.xi.iter().map(|x| x[0]).collect();
    let min_first = first.iter().copied().fold(f64::INFINITY, f64::min);
    let floor = sc.analysis.safety_floor;
    let spacing = SpacingSummary {
        min: min_first,
        final_value: *first.last().expect("non-empty"),
        safety_floor: floor,
        above_floor: floor.map(|f| min_first > f),
    };

    let zeta_measured = art.phases.iter().map(|p| p.duration()).fold(0.0, f64::max);
    let dwell = dwell_record(sc, &oracles, zeta_measured);

    let oracle_report = if oracle {
        Some(oracle_analysis(sc, art, &oracles, &phases, &intervals_raw)?)
    } else {
        None
    };

    let comparison = comparison_summary(sc, art);
    Ok(RunReport {
        scenario: art.info.scenario.clone(),
        seed: art.info.seed,
        runtime_s: art.info.runtime_s,
        q,
        m,
        phases,
        intervals,
        min_phases_per_interval,
        spacing,
        dwell,
        oracle: oracle_report,
        comparison,
    })
}

/// `C x - x_d` read off the integral rows of the augmented model.
fn output_error(md: &AugmentedMode, xi: &DVector<f64>) -> f64 {
    let n = md.n();
    let s = md.s();
    let c = md.a_aug.view((n, 0), (s, n));
    let resid = c * xi.rows(0, n) + md.d_bar.rows(n, s);
    resid.norm()
}

fn oracle_analysis(
    sc: &Scenario,
    art: &Artifacts,
    oracles: &[ModeOracle],
    phases: &[PhaseSummary],
    intervals: &[(f64, f64, u32)],
) -> Result<OracleAnalysis> {
    let log = &art.log;
    let find = |id: u32| {
        oracles
            .iter()
            .find(|o| o.mode == id)
            .ok_or_else(|| Error::Validation(vec![format!("mode {id} is not active in the scenario")]))
    };
    let gain_errors: Vec<f64> = phases
        .iter()
        .filter(|p| !p.mixed)
        .filter_map(|p| p.gain_error)
        .collect();
    let max_gain_error = gain_errors.iter().copied().fold(0.0, f64::max);
    let final_gain_error = gain_errors.last().copied().unwrap_or(f64::NAN);

    // Tracking error against the optimal reference of the active mode.
    let mut err = Vec::with_capacity(log.len());
    for k in 0..log.len() {
        let o = find(log.mode[k])?;
        err.push((&log.xi[k] - &o.reference).norm());
    }

    // Effective optimal dwell: from the first clean handoff in interval j
    // to the next switch.
    let n_int = intervals.len();
    let mut effective = Vec::new();
    for &(a, b, _) in intervals.iter().take(n_int.saturating_sub(1)) {
        let s_j = art
            .phases
            .iter()
            .zip(phases)
            .find(|(p, s)| p.t_start >= a - 1e-9 && p.t_end < b && !s.mixed)
            .map_or(b, |(p, _)| p.t_end);
        effective.push(b - s_j);
    }
    let delta_min = if effective.is_empty() {
        intervals.last().map_or(0.0, |&(a, b, _)| b - a)
    } else {
        effective.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let gamma_min = oracles.iter().map(|o| o.gamma).fold(f64::INFINITY, f64::min);
    let mut delta_r: f64 = 0.0;
    let mut recursion = Vec::new();
    let ps: Vec<SymMatrix> = oracles.iter().map(|o| o.p.clone()).collect();
    let constants = trajectory_bound(&ps, gamma_min, delta_min, 0.0)?;
    for j in 0..n_int.saturating_sub(1) {
        let (oj, on) = (find(intervals[j].2)?, find(intervals[j + 1].2)?);
        let jump = (&oj.reference - &on.reference).norm();
        delta_r = delta_r.max(jump);
        let c_r = 2.0 * on.p.max_eigenvalue() * jump * jump;
        let v = |o: &ModeOracle, k: usize| {
            let e = &log.xi[k] - &o.reference;
            (e.transpose() * o.p.as_matrix() * &e)[(0, 0)]
        };
        let v_j = v(oj, row_at(log, intervals[j].0));
        let v_next = v(on, row_at(log, intervals[j + 1].0));
        recursion.push(RecursionStep {
            j,
            v_j,
            v_next,
            c_r,
            holds: v_next <= constants.contraction_factor * v_j + c_r,
        });
    }
    let constants = trajectory_bound(&ps, gamma_min, delta_min, delta_r)?;
    let recursion_holds = recursion.iter().all(|r| r.holds);
    let slack = 1.0 + sc.analysis.bound_slack;
    let e0 = err[0];
    let t0 = log.t[0];
    let worst = constants.c2.map(|c2| {
        (0..log.len())
            .map(|k| {
                let bound = constants.c1 * (-constants.alpha * (log.t[k] - t0)).exp() * e0 + c2;
                err[k] / (slack * bound)
            })
            .fold(0.0, f64::max)
    });
    let pointwise_holds = worst.is_some_and(|w| w <= 1.0);
    let fitted = fit_envelope(&log.t, &err);
    let switched_bound = SwitchedBoundCheck {
        holds: constants.contracts && recursion_holds && pointwise_holds,
        constants,
        effective_dwell: effective,
        recursion,
        recursion_holds,
        initial_error: e0,
        worst_bound_ratio: worst,
        pointwise_holds,
        fitted,
    };

    // After the last switch the state settles at the equilibrium of the
    // last mode under the gain finally applied.
    let &(t_j, _, last_mode) = intervals.last().expect("at least one interval");
    let final_gain = art.segments.last().map_or(&sc.initial_gain, |s| &s.gain);
    let ref_final = equilibrium(mode_of(sc, last_mode)?, final_gain)?;
    let kj = row_at(log, t_j);
    let tail: Vec<f64> = log.xi[kj..].iter().map(|x| (x - &ref_final).norm()).collect();
    let fitted_tail = fit_envelope(&log.t[kj..], &tail);
    let error_at_switch = tail[0];
    let terminal_error = *tail.last().expect("non-empty tail");
    let ratio = terminal_error / error_at_switch;
    let post_switch_decay = DecayCheck {
        t_final_switch: t_j,
        error_at_switch,
        terminal_error,
        ratio,
        holds: fitted_tail.alpha > 0.0 && ratio < TERMINAL_RATIO,
        fitted: fitted_tail,
    };

    let b_bar = sc
        .active_modes()
        .iter()
        .map(|md| spectral_norm(&md.b_aug))
        .fold(0.0, f64::max);
    let mut mixed_mode = Vec::new();
    for j in 0..n_int.saturating_sub(1) {
        let (from, to) = (intervals[j].2, intervals[j + 1].2);
        let (oj, mj, mn) = (find(from)?, mode_of(sc, from)?, mode_of(sc, to)?);
        let t_switch = intervals[j + 1].0;
        let candidate = art
            .phases
            .iter()
            .find(|p| p.t_end >= t_switch && p.converged)
            .map_or(&oj.gain, |p| &p.learned_gain);
        let delta = (&mn.a_aug - &mj.a_aug) - (&mn.b_aug - &mj.b_aug) * oj.gain.as_matrix();
        let report = mixed_mode_safety_check(&oj.gain, mj, mn, spectral_norm(&delta), oj.gamma, b_bar, candidate);
        mixed_mode.push(MixedPair {
            from_mode: from,
            to_mode: to,
            report,
        });
    }

    Ok(OracleAnalysis {
        modes: oracles.to_vec(),
        max_gain_error,
        final_gain_error,
        switched_bound,
        post_switch_decay,
        mixed_mode,
    })
}

/// Frozen policies simulated noise-free from the run's initial state.
fn comparison_columns(sc: &Scenario, art: &Artifacts) -> Result<Vec<(String, Option<TrajectoryLog>)>> {
    let quiet = ExplorationNoise {
        amplitude: 0.0,
        ..sc.noise.clone()
    };
    let cfg = SimConfig {
        warm_start: 0.0,
        ..sc.sim.clone()
    };
    let frozen = |gain: &GainMatrix, offset: DVector<f64>| -> Option<TrajectoryLog> {
        let p = Policy {
            gain: gain.clone(),
            offset,
            excite: false,
        };
        simulate(&sc.modes, &sc.signal, |_| p.clone(), &quiet, &cfg).ok()
    };
    let zero = DVector::zeros(sc.m);
    let learned = art
        .phases
        .iter()
        .rev()
        .find(|p| p.converged)
        .map_or(&sc.initial_gain, |p| &p.learned_gain);
    let mut cols = vec![
        ("learned".to_string(), frozen(learned, zero.clone())),
        ("initial".to_string(), frozen(&sc.initial_gain, zero)),
    ];
    if let Some(game) = &sc.game {
        let (g, off) = game.cooperative_policy(sc.q());
        cols.push(("cooperative".to_string(), frozen(&g, off)));
    }
    Ok(cols)
}

fn comparison_stride(step: f64) -> usize {
    ((0.01 / step).round() as usize).max(1)
}

fn write_comparison(
    path: &Path,
    run: &TrajectoryLog,
    step: f64,
    cols: &[(String, Option<TrajectoryLog>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["t".to_string(), "run".to_string()];
    header.extend(cols.iter().map(|(n, _)| n.clone()));
    writeln!(w, "{}", header.join(","))?;
    for k in (0..run.len()).step_by(comparison_stride(step)) {
        let mut line = format!("{:.16e},{:.16e}", run.t[k], run.xi[k][0]);
        for (_, log) in cols {
            match log.as_ref().and_then(|l| l.xi.get(k)) {
                Some(x) => line.push_str(&format!(",{:.16e}", x[0])),
                None => line.push_str(",nan"),
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Summaries of the comparison policies, recomputed from the scenario so
/// the report does not depend on the CSV being present.
fn comparison_summary(sc: &Scenario, art: &Artifacts) -> Vec<PolicyOutcome> {
    let floor = sc.analysis.safety_floor;
    let summarize = |name: &str, t: &[f64], v: &[f64]| PolicyOutcome {
        policy: name.to_string(),
        final_value: v.last().copied().unwrap_or(f64::NAN),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        first_below_floor: floor.and_then(|f| v.iter().position(|&x| x < f).map(|i| t[i])),
    };
    let mut out = Vec::new();
    let run: Vec<f64> = art.log.xi.iter().map(|x| x[0]).collect();
    out.push(summarize("run", &art.log.t, &run));
    if let Ok(cols) = comparison_columns(sc, art) {
        for (name, log) in cols {
            if let Some(l) = log {
                let v: Vec<f64> = l.xi.iter().map(|x| x[0]).collect();
                out.push(summarize(&name, &l.t, &v));
            }
        }
    }
    out
}

/// `t,mode,error,bound` with the reference of the active mode.
fn write_tracking(path: &Path, sc: &Scenario, art: &Artifacts, report: &RunReport) -> Result<()> {
    let oa = report.oracle.as_ref().expect("oracle analysis");
    let c = &oa.switched_bound.constants;
    let e0 = oa.switched_bound.initial_error;
    let log = &art.log;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,mode,error,bound")?;
    for k in (0..log.len()).step_by(comparison_stride(sc.sim.step)) {
        let o = oa.modes.iter().find(|o| o.mode == log.mode[k]).expect("mode oracle");
        let e = (&log.xi[k] - &o.reference).norm();
        match c.c2 {
            Some(c2) => {
                let bound = c.c1 * (-c.alpha * (log.t[k] - log.t[0])).exp() * e0 + c2;
                writeln!(w, "{:.16e},{},{:.16e},{:.16e}", log.t[k], log.mode[k], e, bound)?;
            }
            None => writeln!(w, "{:.16e},{},{:.16e},nan", log.t[k], log.mode[k], e)?,
        }
    }
    Ok(())
}
