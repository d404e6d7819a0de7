//! Off-policy policy iteration from trajectory data and the periodic
//! learning schedule.
//!
//! For a stabilizing `K`, along any trajectory of one mode the increments
//! satisfy
//!
//! ```text
//! dxi' P dxi |_{t}^{t+dt} - 2 int (dxi (x) dxi)'(I (x) K'R) vec(K+)
//!     - 2 int (dxi (x) du)'(I (x) R) vec(K+) = - int dxi' (Q + K'RK) dxi
//! ```
//!
//! which is linear in `(svec P, vec K+)`. Stacking `p` windows gives
//! `Theta [svec P; vec K+] = Xi`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedMode;
use crate::error::{Error, Result};
use crate::game::SwitchingSignal;
use crate::linalg::{
    is_hurwitz, kron, log_norm_2, merge_symmetric_columns, spectral_norm, svec_len, unsvec, vec, GainMatrix, SymMatrix,
};
use crate::sim::{BatchBuilder, DataBatch, ExplorationNoise, Policy, Quadrature, SimConfig, Simulator, TrajectoryLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::max_policy_iters")]
    pub max_policy_iters: usize,
    pub inter_learning_interval: f64,
    #[serde(default = "defaults::rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "defaults::p_min")]
    pub p_min: usize,
    /// Collection gives up with `RankDeficient` after this many windows.
    #[serde(default = "defaults::max_windows")]
    pub max_windows: usize,
    pub tau: f64,
    pub delta_tau: f64,
    /// Declared bound on the learning duration, checked against the
    /// realized one.
    #[serde(default)]
    pub zeta_max: Option<f64>,
    #[serde(default)]
    pub quadrature: Quadrature,
}

mod defaults {
    pub fn eps() -> f64 {
        1e-6
    }
    pub fn max_policy_iters() -> usize {
        50
    }
    pub fn rank_tol() -> f64 {
        1e-8
    }
    pub fn p_min() -> usize {
        100
    }
    pub fn max_windows() -> usize {
        1000
    }
}

impl LearnerConfig {
    pub fn new(tau: f64, delta_tau: f64, inter_learning_interval: f64) -> Self {
        LearnerConfig {
            eps: defaults::eps(),
            max_policy_iters: defaults::max_policy_iters(),
            inter_learning_interval,
            rank_tol: defaults::rank_tol(),
            p_min: defaults::p_min(),
            max_windows: defaults::max_windows(),
            tau,
            delta_tau,
            zeta_max: None,
            quadrature: Quadrature::default(),
        }
    }

    pub fn validate(&self, q: usize, m: usize) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eps > 0.0) {
            problems.push(format!("eps must be positive, got {}", self.eps));
        }
        if self.max_policy_iters == 0 {
            problems.push("max_policy_iters must be at least 1".into());
        }
        if !(self.inter_learning_interval >= 0.0 && self.inter_learning_interval.is_finite()) {
            problems.push("inter_learning_interval must be >= 0".into());
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            problems.push("rank_tol must lie in (0, 1)".into());
        }
        let required = required_rank(q, m);
        if self.p_min < required {
            problems.push(format!("p_min = {} is below the required rank {required}", self.p_min));
        }
        if self.max_windows < self.p_min {
            problems.push("max_windows must be >= p_min".into());
        }
        if !(self.tau > 0.0 && self.delta_tau > 0.0) {
            problems.push("tau and delta_tau must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Mitigation cost weights `(Q, R1_tilde)` on the augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct MitigationCost {
    pub q: SymMatrix,
    pub r: SymMatrix,
}

/// `q(q+1)/2 + m q`.
pub fn required_rank(q: usize, m: usize) -> usize {
    svec_len(q) + m * q
}

/// `(P^k, K^{k+1})` from one data-driven evaluation/improvement step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyIterate {
    #[serde(rename = "k")]
    pub k_index: usize,
    #[serde(rename = "P")]
    pub p: SymMatrix,
    #[serde(rename = "K")]
    pub k: GainMatrix,
    /// `||P^k - P^{k-1}||_F`, with `P^{-1} = 0`.
    pub residual: f64,
}

fn check_batch(batch: &DataBatch) -> Result<()> {
    let (q, m, p) = (batch.q, batch.m, batch.p());
    let shapes = [
        (batch.delta_xx.shape(), (p, svec_len(q))),
        (batch.ixx.shape(), (p, q * q)),
        (batch.ixu.shape(), (p, q * m)),
    ];
    if shapes.iter().any(|(got, want)| got != want) {
        return Err(Error::DimensionMismatch(format!(
            "batch matrices inconsistent with q = {q}, m = {m}, p = {p}"
        )));
    }
    Ok(())
}

/// `Theta = [delta_xx, -2 Ixx (I (x) K'R) - 2 Ixu (I (x) R)]`,
/// `Xi = -Ixx vec(Q + K'RK)`.
pub fn assemble(
    batch: &DataBatch,
    k: &GainMatrix,
    q_weight: &SymMatrix,
    r_weight: &SymMatrix,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_batch(batch)?;
    let (q, m) = (batch.q, batch.m);
    if k.shape() != (m, q) || q_weight.dim() != q || r_weight.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "gain {}x{}, Q {}, R {} incompatible with q = {q}, m = {m}",
            k.nrows(),
            k.ncols(),
            q_weight.dim(),
            r_weight.dim()
        )));
    }
    let p = batch.p();
    let kmat = k.as_matrix();
    let r = r_weight.as_matrix();
    let iq = DMatrix::<f64>::identity(q, q);
    let kr = kmat.transpose() * r;
    let kblock = (&batch.ixx * kron(&iq, &kr) + &batch.ixu * kron(&iq, r)) * -2.0;
    let ns = svec_len(q);
    let mut theta = DMatrix::zeros(p, ns + m * q);
    theta.view_mut((0, 0), (p, ns)).copy_from(&batch.delta_xx);
    theta.view_mut((0, ns), (p, m * q)).copy_from(&kblock);
    let qk = q_weight.as_matrix() + &kr * kmat;
    let xi = -(&batch.ixx * vec(&qk));
    Ok((theta, xi))
}

/// Outcome of the excitation test on `[Ixx_reduced | Ixu]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCheck {
    pub ok: bool,
    pub achieved: usize,
    pub required: usize,
}

/// Columns scaled to unit norm so the threshold compares directions, not
/// the very different magnitudes of the quadratic and cross integrals.
fn equilibrate(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut scaled = m.clone();
    let mut d = DVector::from_element(m.ncols(), 1.0);
    for j in 0..m.ncols() {
        let n = m.column(j).norm();
        if n > 0.0 {
            d[j] = 1.0 / n;
            scaled.column_mut(j).scale_mut(1.0 / n);
        }
    }
    (scaled, d)
}

fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

pub fn rank_ok(batch: &DataBatch, rank_tol: f64) -> RankCheck {
    let (q, m) = (batch.q, batch.m);
    let required = required_rank(q, m);
    let p = batch.p();
    let achieved = if p == 0 {
        0
    } else {
        let reduced = merge_symmetric_columns(&batch.ixx, q).expect("batch shape checked");
        let mut data = DMatrix::zeros(p, required);
        data.view_mut((0, 0), (p, svec_len(q))).copy_from(&reduced);
        data.view_mut((0, svec_len(q)), (p, q * m)).copy_from(&batch.ixu);
        numerical_rank(&equilibrate(&data).0, rank_tol)
    };
    RankCheck {
        ok: achieved == required,
        achieved,
        required,
    }
}

/// Least squares with column equilibration and an SVD rank guard.
fn solve_least_squares(theta: &DMatrix<f64>, xi: &DVector<f64>, rank_tol: f64) -> Result<DVector<f64>> {
    let (scaled, d) = equilibrate(theta);
    let svd = scaled.svd(true, true);
    let top = svd.singular_values.max();
    let achieved = svd.singular_values.iter().filter(|&&s| s > rank_tol * top).count();
    if achieved < theta.ncols() {
        return Err(Error::RankDeficient {
            achieved,
            required: theta.ncols(),
        });
    }
    let y = svd
        .solve(xi, rank_tol * top)
        .map_err(|e| Error::SingularSystem(e.to_string()))?;
    Ok(y.component_mul(&d))
}

/// Iterates the data equation from `k0` until `||P^k - P^{k-1}||_F < eps`.
pub fn policy_iteration(
    batch: &DataBatch,
    k0: &GainMatrix,
    cfg: &LearnerConfig,
    cost: &MitigationCost,
) -> Result<Vec<PolicyIterate>> {
    let (out, converged) = iterate_until_stall(batch, k0, cfg, cost)?;
    if converged {
        return Ok(out);
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_policy_iters,
        residual: out.last().map_or(f64::NAN, |it| it.residual),
        trace: out.iter().map(|it| it.residual).collect(),
    })
}

/// Like [`policy_iteration`], but a stall at `max_policy_iters` returns the
/// iterates with `false` instead of failing.
fn iterate_until_stall(
    batch: &DataBatch,
    k0: &GainMatrix,
    cfg: &LearnerConfig,
    cost: &MitigationCost,
) -> Result<(Vec<PolicyIterate>, bool)> {
    let (q, m) = (batch.q, batch.m);
    let rank = rank_ok(batch, cfg.rank_tol);
    if !rank.ok {
        return Err(Error::RankDeficient {
            achieved: rank.achieved,
            required: rank.required,
        });
    }
    let ns = svec_len(q);
    let mut k = k0.clone();
    let mut prev: Option<DMatrix<f64>> = None;
    let mut out = Vec::new();
    for idx in 0..cfg.max_policy_iters {
        let (theta, xi) = assemble(batch, &k, &cost.q, &cost.r)?;
        let sol = solve_least_squares(&theta, &xi, cfg.rank_tol)?;
        let p = unsvec(&sol.rows(0, ns).clone_owned(), q)?;
        let knext = DMatrix::from_column_slice(m, q, sol.rows(ns, m * q).as_slice());
        let residual = match &prev {
            Some(pp) => (p.as_matrix() - pp).norm(),
            None => p.as_matrix().norm(),
        };
        prev = Some(p.as_matrix().clone());
        let knext = GainMatrix::new(knext)?;
        out.push(PolicyIterate {
            k_index: idx,
            p,
            k: knext.clone(),
            residual,
        });
        k = knext;
        if idx > 0 && residual < cfg.eps {
            return Ok((out, true));
        }
    }
    Ok((out, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellFeasibility {
    pub omega_min: f64,
    pub gamma_min: f64,
    pub nu: f64,
    pub zeta_max: f64,
    pub delta_t: f64,
    pub feasible: bool,
    /// `omega_min - ln(2 nu)/gamma_min - 2 zeta_max - delta_t`.
    pub margin: f64,
}

/// `delta_t < omega_min - ln(2 nu)/gamma_min - 2 zeta_max`.
pub fn dwell_feasibility(
    gamma_min: f64,
    nu: f64,
    zeta_max: f64,
    omega_min: f64,
    delta_t: f64,
) -> Result<DwellFeasibility> {
    if !(gamma_min > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma_min must be positive, got {gamma_min}"
        )));
    }
    if !(nu >= 1.0) {
        return Err(Error::InvalidParameter(format!("nu must be >= 1, got {nu}")));
    }
    let rhs = omega_min - (2.0 * nu).ln() / gamma_min - 2.0 * zeta_max;
    let margin = rhs - delta_t;
    Ok(DwellFeasibility {
        omega_min,
        gamma_min,
        nu,
        zeta_max,
        delta_t,
        feasible: margin > 0.0,
        margin,
    })
}

/// Stability of the next mode's closed loop under the previous optimal gain
/// and under a candidate gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedModeReport {
    pub mu2_star: f64,
    pub mu2_mixed: f64,
    pub perturbation_norm: f64,
    pub gamma: f64,
    pub perturbation_bound: f64,
    pub b_bar: f64,
    /// `||Delta||_2 < gamma`.
    pub mixed_hypothesis: bool,
    pub mixed_hurwitz: bool,
    pub gain_distance: f64,
    /// `(gamma - perturbation_bound) / b_bar`.
    pub gain_bound: f64,
    /// `perturbation_bound < gamma` and `gain_distance < gain_bound`.
    pub candidate_hypothesis: bool,
    pub candidate_hurwitz: bool,
    pub mu2_candidate: f64,
}

pub fn mixed_mode_safety_check(
    k_prev_star: &GainMatrix,
    mode_j: &AugmentedMode,
    mode_next: &AugmentedMode,
    perturbation_bound: f64,
    gamma: f64,
    b_bar: f64,
    candidate: &GainMatrix,
) -> MixedModeReport {
    let k = k_prev_star.as_matrix();
    let a_star = mode_j.closed_loop(k_prev_star);
    let a_mixed = mode_next.closed_loop(k_prev_star);
    let delta = (&mode_next.a_aug - &mode_j.a_aug) - (&mode_next.b_aug - &mode_j.b_aug) * k;
    let perturbation_norm = spectral_norm(&delta);
    let gain_distance = spectral_norm(&(candidate.as_matrix() - k));
    let gain_bound = (gamma - perturbation_bound) / b_bar;
    let a_cand = mode_next.closed_loop(candidate);
    MixedModeReport {
        mu2_star: log_norm_2(&a_star),
        mu2_mixed: log_norm_2(&a_mixed),
        perturbation_norm,
        gamma,
        perturbation_bound,
        b_bar,
        mixed_hypothesis: perturbation_norm < gamma,
        mixed_hurwitz: is_hurwitz(&a_mixed),
        gain_distance,
        gain_bound,
        candidate_hypothesis: perturbation_bound < gamma && gain_distance < gain_bound,
        candidate_hurwitz: is_hurwitz(&a_cand),
        mu2_candidate: log_norm_2(&a_cand),
    }
}

/// Constants of the switched trajectory bound evaluated from the optimal
/// value matrices of all modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBound {
    pub nu: f64,
    pub gamma_min: f64,
    pub delta_min: f64,
    pub contraction_factor: f64,
    pub alpha: f64,
    pub c1: f64,
    /// `None` unless the recursion contracts.
    pub c2: Option<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub delta_r: f64,
    /// `contraction_factor < 1`; `alpha` is meaningful only then.
    pub contracts: bool,
}

/// `max_{i,j} lambda_max(P_i^{-1} P_j)`.
pub fn nu_ratio(ps: &[SymMatrix]) -> Result<f64> {
    let mut nu: f64 = 1.0;
    for pi in ps {
        let chol = pi
            .as_matrix()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("value matrix is not positive definite".into()))?;
        let l_inv = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::SingularSystem("Cholesky factor".into()))?;
        for pj in ps {
            let s = SymMatrix::symmetrize(&l_inv * pj.as_matrix() * l_inv.transpose());
            nu = nu.max(s.max_eigenvalue());
        }
    }
    Ok(nu)
}

pub fn trajectory_bound(ps: &[SymMatrix], gamma_min: f64, delta_min: f64, delta_r: f64) -> Result<TrajectoryBound> {
    let nu = nu_ratio(ps)?;
    let lambda_min = ps.iter().map(|p| p.min_eigenvalue()).fold(f64::INFINITY, f64::min);
    let lambda_max = ps.iter().map(|p| p.max_eigenvalue()).fold(0.0, f64::max);
    let contraction_factor = 2.0 * nu * (-2.0 * gamma_min * delta_min).exp();
    let contracts = contraction_factor < 1.0;
    let alpha = -contraction_factor.ln() / (2.0 * delta_min);
    let c1 = (lambda_max / lambda_min).sqrt();
    let c2 = contracts.then(|| (2.0 * lambda_max / lambda_min).sqrt() * delta_r / (1.0 - contraction_factor).sqrt());
    Ok(TrajectoryBound {
        nu,
        gamma_min,
        delta_min,
        contraction_factor,
        alpha,
        c1,
        c2,
        lambda_min,
        lambda_max,
        delta_r,
        contracts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmStart,
    Collecting,
    Iterating,
    PostLearning,
}

/// One constant-policy stretch of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub phase: Phase,
    pub t_start: f64,
    pub t_end: f64,
    pub gain: GainMatrix,
}

/// Summary of one learning phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningPhase {
    pub index: usize,
    /// Trigger time `tau_1`.
    pub t_start: f64,
    /// End of the last window `tau_p + delta_tau`.
    pub t_end: f64,
    pub windows: usize,
    pub rank: RankCheck,
    pub behavior_gain: GainMatrix,
    pub learned_gain: GainMatrix,
    #[serde(rename = "P")]
    pub p: SymMatrix,
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

impl LearningPhase {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseIterate {
    pub phase: usize,
    #[serde(flatten)]
    pub iterate: PolicyIterate,
}

/// Phase and bookkeeping of the periodic learner.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub phase: Phase,
    pub t_next: f64,
    pub current_gain: GainMatrix,
    pub learned_gains: Vec<(f64, GainMatrix, SymMatrix)>,
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub segments: Vec<Segment>,
    pub phases: Vec<LearningPhase>,
    pub iterates: Vec<PhaseIterate>,
    pub log: TrajectoryLog,
    pub state: ScheduleState,
}

/// Runs the periodic learner against the switched plant. The learner sees
/// only `(xi, u)` samples; the switching signal drives the plant alone.
pub fn run_schedule(
    modes: &[AugmentedMode],
    signal: &SwitchingSignal,
    sim_cfg: &SimConfig,
    learner: &LearnerConfig,
    cost: &MitigationCost,
    noise: &ExplorationNoise,
    k0: &GainMatrix,
) -> Result<ScheduleOutcome> {
    let first = modes
        .first()
        .ok_or_else(|| Error::InvalidParameter("no modes".into()))?;
    let (q, m) = (first.q(), first.m());
    learner.validate(q, m)?;
    noise.validate()?;
    if k0.shape() != (m, q) {
        return Err(Error::DimensionMismatch(format!("initial gain must be {m}x{q}")));
    }
    if sim_cfg.warm_start < learner.tau {
        return Err(Error::InvalidParameter(format!(
            "warm_start {} is shorter than tau {}",
            sim_cfg.warm_start, learner.tau
        )));
    }
    let mut sim = Simulator::new(modes, signal, noise.realize(m), sim_cfg)?;
    let h = sim.step_size();
    let n_steps = sim_cfg.steps();
    let tol = 0.5 * h;

    let mut state = ScheduleState {
        phase: Phase::WarmStart,
        t_next: sim_cfg.warm_start,
        current_gain: k0.clone(),
        learned_gains: Vec::new(),
    };
    let mut segments = Vec::new();
    let mut phases = Vec::new();
    let mut iterates = Vec::new();
    let mut seg_start = 0.0;
    let mut builder: Option<BatchBuilder> = None;
    let mut trigger = 0.0;
    let mut last_checked = 0;

    let close = |segments: &mut Vec<Segment>, phase, start: f64, end: f64, gain: &GainMatrix| {
        if end > start + tol {
            segments.push(Segment {
                phase,
                t_start: start,
                t_end: end,
                gain: gain.clone(),
            });
        }
    };

    while sim.steps_taken() < n_steps {
        let t = sim.time();
        if matches!(state.phase, Phase::WarmStart | Phase::PostLearning) && t >= state.t_next - tol {
            close(&mut segments, state.phase, seg_start, t, &state.current_gain);
            seg_start = t;
            trigger = t;
            state.phase = Phase::Collecting;
            // The excitation switches on at `t`, so `u` jumps there. Windows
            // start one delay later, where both `u(s)` and `u(s - tau)` are
            // on the excited side of the jump.
            let mut b = BatchBuilder::new(
                q,
                m,
                learner.tau,
                learner.delta_tau,
                h,
                t + learner.tau,
                learner.quadrature,
            )?;
            let log = sim.log();
            let from = log
                .index_at(t - learner.tau)
                .ok_or_else(|| Error::InsufficientHistory(format!("no sample tau before trigger t = {t}")))?;
            for k in from..log.len() {
                b.push(log.t[k], &log.xi[k], &log.u[k])?;
            }
            builder = Some(b);
            last_checked = 0;
        }

        let excite = matches!(state.phase, Phase::WarmStart | Phase::Collecting);
        let policy = Policy::linear(state.current_gain.clone(), excite);
        sim.advance(&policy)?;

        if state.phase != Phase::Collecting {
            continue;
        }
        let b = builder.as_mut().expect("collecting without builder");
        let log = sim.log();
        let k = log.len() - 1;
        b.push(log.t[k], &log.xi[k], &log.u[k])?;
        let done = b.completed();
        if done < learner.p_min || done == last_checked {
            continue;
        }
        last_checked = done;
        let batch = b.batch();
        let rank = rank_ok(&batch, learner.rank_tol);
        if !rank.ok {
            if done >= learner.max_windows {
                return Err(Error::RankDeficient {
                    achieved: rank.achieved,
                    required: rank.required,
                });
            }
            continue;
        }

        let t_data_end = batch.windows.last().map_or(log.t[k], |w| w.1);
        close(
            &mut segments,
            Phase::Collecting,
            seg_start,
            t_data_end,
            &state.current_gain,
        );
        state.phase = Phase::Iterating;
        // A stall (e.g. on a batch spanning a switch) is recorded but not
        // handed off; the last iterate of inconsistent data can destabilize.
        let (its, converged) = iterate_until_stall(&batch, &state.current_gain, learner, cost)?;
        let last = its.last().expect("at least one iterate").clone();
        let idx = phases.len();
        phases.push(LearningPhase {
            index: idx,
            t_start: trigger,
            t_end: t_data_end,
            windows: batch.p(),
            rank,
            behavior_gain: state.current_gain.clone(),
            learned_gain: last.k.clone(),
            p: last.p.clone(),
            iterations: its.len(),
            final_residual: last.residual,
            converged,
        });
        iterates.extend(its.into_iter().map(|iterate| PhaseIterate { phase: idx, iterate }));
        if converged {
            state.learned_gains.push((t_data_end, last.k.clone(), last.p.clone()));
            state.current_gain = last.k;
        }
        state.t_next += (t_data_end - trigger) + learner.inter_learning_interval;
        state.phase = Phase::PostLearning;
        seg_start = t_data_end;
        builder = None;
    }
    let t_end = sim.time();
    close(&mut segments, state.phase, seg_start, t_end, &state.current_gain);
    let excite = matches!(state.phase, Phase::WarmStart | Phase::Collecting);
    let log = sim.finish(&Policy::linear(state.current_gain.clone(), excite));
    Ok(ScheduleOutcome {
        segments,
        phases,
        iterates,
        log,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svec;

    fn toy_batch() -> DataBatch {
        DataBatch {
            q: 1,
            m: 1,
            delta_xx: DMatrix::from_element(1, 1, 4.0 - 1.0),
            ixx: DMatrix::from_element(1, 1, 0.03),
            ixu: DMatrix::from_element(1, 1, 0.01),
            windows: vec![(0.0, 0.02)],
        }
    }

    #[test]
    fn hand_computed_assembly() {
        let k = GainMatrix::new(DMatrix::from_element(1, 1, 0.5)).unwrap();
        let (theta, xi) = assemble(&toy_batch(), &k, &SymMatrix::identity(1), &SymMatrix::identity(1)).unwrap();
        assert!((theta[(0, 0)] - 3.0).abs() < 1e-15);
        assert!((theta[(0, 1)] + 0.05).abs() < 1e-15);
        assert!((xi[0] + 0.0375).abs() < 1e-15);
    }

    #[test]
    fn zero_batch_assembles_to_zero() {
        let batch = DataBatch::zeros(3, 2, 5);
        let k = GainMatrix::new(DMatrix::from_element(2, 3, 0.7)).unwrap();
        let (theta, xi) = assemble(&batch, &k, &SymMatrix::identity(3), &SymMatrix::identity(2)).unwrap();
        assert_eq!(theta.shape(), (5, 12));
        assert_eq!(theta.amax(), 0.0);
        assert_eq!(xi.amax(), 0.0);
    }

    #[test]
    fn assembly_dimension_mismatch() {
        let k = GainMatrix::zeros(1, 2);
        assert!(matches!(
            assemble(&toy_batch(), &k, &SymMatrix::identity(1), &SymMatrix::identity(1)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn required_rank_for_lane_change() {
        assert_eq!(required_rank(4, 1), 14);
    }

    #[test]
    fn short_batch_fails_rank() {
        let mut b = DataBatch::zeros(4, 1, 5);
        b.ixx = DMatrix::from_fn(5, 16, |i, j| ((i * 16 + j) as f64).sin());
        b.ixu = DMatrix::from_fn(5, 4, |i, j| ((i + 3 * j) as f64).cos());
        let r = rank_ok(&b, 1e-8);
        assert!(!r.ok);
        assert!(r.achieved <= 5);
        let cfg = LearnerConfig::new(0.1, 0.02, 10.0);
        let cost = MitigationCost {
            q: SymMatrix::identity(4),
            r: SymMatrix::identity(1),
        };
        assert!(matches!(
            policy_iteration(&b, &GainMatrix::zeros(1, 4), &cfg, &cost),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn exact_linear_data_recovers_unknowns() {
        // Rows built to satisfy Theta x = Xi exactly for a known x.
        let q = 2;
        let m = 1;
        let p = 12;
        let mut b = DataBatch::zeros(q, m, p);
        for i in 0..p {
            let f = |j: usize| (((i * 13 + j * 7) as f64).powi(2) * 0.123).sin();
            let ixx_sym = DMatrix::from_row_slice(2, 2, &[f(0).abs() + 0.1, f(1), f(1), f(2).abs() + 0.1]);
            b.ixx.set_row(i, &vec(&ixx_sym).transpose());
            b.ixu.set_row(i, &DMatrix::from_row_slice(1, 2, &[f(3), f(4)]).row(0));
            b.delta_xx
                .set_row(i, &DMatrix::from_row_slice(1, 3, &[f(5), f(6), f(7)]).row(0));
        }
        let cfg = LearnerConfig {
            p_min: 5,
            ..LearnerConfig::new(0.1, 0.02, 1.0)
        };
        assert!(rank_ok(&b, cfg.rank_tol).ok);
        let k = GainMatrix::new(DMatrix::from_row_slice(1, 2, &[0.3, -0.2])).unwrap();
        let cost = MitigationCost {
            q: SymMatrix::identity(2),
            r: SymMatrix::identity(1),
        };
        let (theta, _) = assemble(&b, &k, &cost.q, &cost.r).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.5, 2.0, -0.4, 0.8]);
        let xi = &theta * &x;
        let sol = solve_least_squares(&theta, &xi, 1e-8).unwrap();
        assert!((sol - x).norm() < 1e-10);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        assert_eq!(svec(&p).as_slice(), &[1.0, 0.5, 2.0]);
    }

    #[test]
    fn dwell_feasibility_arithmetic() {
        let d = dwell_feasibility(1.0, 1.0, 1.0, 24.0, 10.0).unwrap();
        assert!(d.feasible);
        assert!((d.margin - (24.0 - 2f64.ln() - 2.0 - 10.0)).abs() < 1e-12);
        assert!((d.margin - 11.3069).abs() < 1e-4);
        assert!(!dwell_feasibility(1.0, 1.0, 1.0, 24.0, 24.0).unwrap().feasible);
        assert!(dwell_feasibility(1.0, 0.5, 1.0, 24.0, 10.0).is_err());
        assert!(dwell_feasibility(0.0, 1.0, 1.0, 24.0, 10.0).is_err());
    }

    #[test]
    fn identical_modes_have_zero_perturbation() {
        use crate::game::ModeLabel;
        let mode = AugmentedMode::from_parts(
            1,
            ModeLabel::Cooperative,
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DVector::zeros(2),
            1,
        )
        .unwrap();
        let k = GainMatrix::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        let mu = log_norm_2(&mode.closed_loop(&k));
        let gamma = (-mu).max(0.1);
        let r = mixed_mode_safety_check(&k, &mode, &mode, 0.0, gamma, 1.0, &k);
        assert_eq!(r.perturbation_norm, 0.0);
        assert_eq!(r.gain_distance, 0.0);
        assert!(r.mixed_hypothesis);
        assert!(r.candidate_hypothesis);
        assert!(r.mu2_mixed <= r.mu2_star + r.perturbation_norm + 1e-12);
    }

    #[test]
    fn nu_of_identical_matrices_is_one() {
        let p = SymMatrix::from_diagonal(&[1.0, 3.0]);
        assert!((nu_ratio(&[p.clone(), p]).unwrap() - 1.0).abs() < 1e-12);
        let a = SymMatrix::from_diagonal(&[1.0, 1.0]);
        let b = SymMatrix::from_diagonal(&[2.0, 0.5]);
        assert!((nu_ratio(&[a, b]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_bound_formulas() {
        let p = SymMatrix::from_diagonal(&[1.0, 4.0]);
        let tb = trajectory_bound(&[p.clone(), p], 1.0, 2.0, 0.5).unwrap();
        let rho = 2.0 * (-4.0f64).exp();
        assert!((tb.contraction_factor - rho).abs() < 1e-15);
        assert!((tb.alpha - (-rho.ln() / 4.0)).abs() < 1e-12);
        assert!((tb.c1 - 2.0).abs() < 1e-12);
        assert!((tb.c2.unwrap() - 8f64.sqrt() * 0.5 / (1.0 - rho).sqrt()).abs() < 1e-12);
        assert!(tb.contracts);
    }

    #[test]
    fn learner_config_validation() {
        let mut c = LearnerConfig::new(0.1, 0.02, 10.0);
        assert!(c.validate(4, 1).is_ok());
        c.p_min = 10;
        assert!(c.validate(4, 1).is_err());
    }
}
