//! Ground-truth insider behaviors from the linear-quadratic team game.
//!
//! The nominal team solves one joint LQR problem. An insider then deviates
//! to the best response of its private objective against the DM's nominal
//! policy; from the DM's point of view this yields a new plant mode
//! `x' = A_sigma x + B1 u1 + d_sigma`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, is_hurwitz, is_stabilizable, kleinman_iterate, GainMatrix, SymMatrix};

const ARE_TOL: f64 = 1e-10;
const ARE_MAX_ITER: usize = 100;

#[derive(Debug, Clone)]
pub struct TeamGameSpec {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub qc: SymMatrix,
    pub r1: SymMatrix,
    pub r2: SymMatrix,
    pub x_c_ref: DVector<f64>,
}

impl TeamGameSpec {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Joint input matrix `[B1 B2]`.
    pub fn joint_input(&self) -> DMatrix<f64> {
        let n = self.n();
        let (m1, m2) = (self.b1.ncols(), self.b2.ncols());
        let mut b = DMatrix::zeros(n, m1 + m2);
        b.view_mut((0, 0), (n, m1)).copy_from(&self.b1);
        b.view_mut((0, m1), (n, m2)).copy_from(&self.b2);
        b
    }

    pub fn joint_weight(&self) -> SymMatrix {
        let (m1, m2) = (self.r1.dim(), self.r2.dim());
        let mut r = DMatrix::zeros(m1 + m2, m1 + m2);
        r.view_mut((0, 0), (m1, m1)).copy_from(self.r1.as_matrix());
        r.view_mut((m1, m1), (m2, m2)).copy_from(self.r2.as_matrix());
        SymMatrix::symmetrize(r)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let mut problems = Vec::new();
        if !self.a.is_square() {
            problems.push(format!("A must be square, got {}x{}", n, self.a.ncols()));
        }
        if self.b1.nrows() != n || self.b2.nrows() != n {
            problems.push("B1 and B2 must have as many rows as A".to_string());
        }
        if self.b1.ncols() != self.b2.ncols() {
            problems.push("B1 and B2 must have the same number of columns".to_string());
        }
        if self.qc.dim() != n {
            problems.push(format!("Qc must be {n}x{n}"));
        }
        if self.r1.dim() != self.b1.ncols() || self.r2.dim() != self.b2.ncols() {
            problems.push("R1/R2 dimensions must match B1/B2 columns".to_string());
        }
        if self.x_c_ref.len() != n {
            problems.push(format!("x_c_ref must have {n} entries"));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        for (name, w) in [("Qc", &self.qc), ("R1", &self.r1), ("R2", &self.r2)] {
            if !w.is_positive_definite() {
                problems.push(format!("{name} must be positive definite"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        if !is_stabilizable(&self.a, &self.joint_input()) {
            return Err(Error::NotStabilizable("(A, [B1 B2])".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InsiderObjective {
    pub qa: SymMatrix,
    pub r2_tilde: SymMatrix,
    pub rho_discipline: f64,
    pub x_a_ref: DVector<f64>,
}

impl InsiderObjective {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.qa.dim() != n || self.x_a_ref.len() != n {
            problems.push(format!("Qa must be {n}x{n} and x_a_ref length {n}"));
        } else if !self.qa.is_positive_definite() {
            problems.push("Qa must be positive definite".into());
        }
        if self.r2_tilde.dim() != m {
            problems.push(format!("R2_tilde must be {m}x{m}"));
        } else if !self.r2_tilde.is_positive_definite() {
            problems.push("R2_tilde must be positive definite".into());
        }
        if !(self.rho_discipline > 0.0 && self.rho_discipline.is_finite()) {
            problems.push("rho_discipline must be positive and finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Team-optimal feedback `u_i = -K_i x - k_i`.
#[derive(Debug, Clone)]
pub struct TeamSolution {
    pub p_star: SymMatrix,
    pub k1: GainMatrix,
    pub k1_offset: DVector<f64>,
    pub k2: GainMatrix,
    pub k2_offset: DVector<f64>,
}

pub fn team_optimal_solution(spec: &TeamGameSpec) -> Result<TeamSolution> {
    spec.validate()?;
    let b = spec.joint_input();
    let r = spec.joint_weight();
    let sol = linalg::lqr_oracle(&spec.a, &b, &spec.qc, &r)?;
    let p = sol.p;

    let k1 = spec
        .r1
        .as_matrix()
        .clone()
        .cholesky()
        .expect("validated positive definite")
        .solve(&(spec.b1.transpose() * p.as_matrix()));
    let k2 = spec
        .r2
        .as_matrix()
        .clone()
        .cholesky()
        .expect("validated positive definite")
        .solve(&(spec.b2.transpose() * p.as_matrix()));
    let k1_offset = -(&k1 * &spec.x_c_ref);
    let k2_offset = -(&k2 * &spec.x_c_ref);

    let acl = &spec.a - &spec.b1 * &k1 - &spec.b2 * &k2;
    if !is_hurwitz(&acl) {
        return Err(Error::NotHurwitz {
            abscissa: linalg::spectral_abscissa(&acl),
        });
    }
    Ok(TeamSolution {
        p_star: p,
        k1: GainMatrix::new(k1)?,
        k1_offset,
        k2: GainMatrix::new(k2)?,
        k2_offset,
    })
}

/// The insider's best response `u2 = -K2_dia x - k2_dia`.
#[derive(Debug, Clone)]
pub struct InsiderResponse {
    /// Solution of the insider ARE.
    pub p2: SymMatrix,
    pub k2_dia: GainMatrix,
    pub k2_dia_offset: DVector<f64>,
}

/// Best response against the DM's nominal gain `k1`.
///
/// The insider ARE carries the cross term `rho K2*^T`; it is reduced to a
/// plain ARE on `(A - B1 K1 - rho B2 Rt^{-1} K2*, B2)` with input weight
/// `Rt = R2_tilde + rho I`, then solved by Kleinman iteration started from
/// the cooperative gain `K2*` (the large-rho limit).
pub fn insider_best_response(
    spec: &TeamGameSpec,
    obj: &InsiderObjective,
    k1: &GainMatrix,
    k2_team: &GainMatrix,
) -> Result<InsiderResponse> {
    let n = spec.n();
    let m = spec.b2.ncols();
    obj.validate(n, m)?;
    if k1.ncols() != n || k2_team.ncols() != n || k2_team.nrows() != m {
        return Err(Error::DimensionMismatch("gain dimensions do not match the game".into()));
    }
    let rho = obj.rho_discipline;
    let a_shift = &spec.a - &spec.b1 * k1.as_matrix();
    if !is_stabilizable(&a_shift, &spec.b2) {
        return Err(Error::NotStabilizable("(A - B1 K1, B2)".into()));
    }

    let rt = SymMatrix::symmetrize(obj.r2_tilde.as_matrix() + DMatrix::<f64>::identity(m, m) * rho);
    let rt_inv = rt
        .as_matrix()
        .clone()
        .cholesky()
        .expect("R2_tilde + rho I is positive definite")
        .inverse();
    let k2 = k2_team.as_matrix();
    let a_tilde = &a_shift - &spec.b2 * &rt_inv * k2 * rho;
    let q_tilde = SymMatrix::symmetrize(
        obj.qa.as_matrix() + k2.transpose() * k2 * rho - k2.transpose() * &rt_inv * k2 * (rho * rho),
    );

    // K2_dia = K2* corresponds to L0 = Rt^{-1} R2_tilde K2*.
    let l0 = GainMatrix::new(&rt_inv * obj.r2_tilde.as_matrix() * k2)?;
    let l0 = if is_hurwitz(&(&a_tilde - &spec.b2 * l0.as_matrix())) {
        l0
    } else {
        linalg::stabilizing_gain(&a_tilde, &spec.b2)?
    };
    let sol = kleinman_iterate(&a_tilde, &spec.b2, &q_tilde, &rt, &l0, ARE_TOL, ARE_MAX_ITER)?;
    let p2 = sol.p;

    let k2_dia = &rt_inv * (spec.b2.transpose() * p2.as_matrix() + k2 * rho);
    let k2_dia_offset = -(&k2_dia * &obj.x_a_ref);
    Ok(InsiderResponse {
        p2,
        k2_dia: GainMatrix::new(k2_dia)?,
        k2_dia_offset,
    })
}

/// Residual of the insider ARE in its original (cross-term) form.
pub fn insider_are_residual(
    spec: &TeamGameSpec,
    obj: &InsiderObjective,
    k1: &GainMatrix,
    k2_team: &GainMatrix,
    p2: &DMatrix<f64>,
) -> f64 {
    let m = spec.b2.ncols();
    let rho = obj.rho_discipline;
    let a_shift = &spec.a - &spec.b1 * k1.as_matrix();
    let k2 = k2_team.as_matrix();
    let rt_inv = (obj.r2_tilde.as_matrix() + DMatrix::<f64>::identity(m, m) * rho)
        .try_inverse()
        .expect("positive definite");
    let cross = p2 * &spec.b2 + k2.transpose() * rho;
    let res = a_shift.transpose() * p2 + p2 * &a_shift + obj.qa.as_matrix() + k2.transpose() * k2 * rho
        - &cross * rt_inv * cross.transpose();
    res.norm()
}

/// `(A - B1 K1) x_a_ref - B1 k1`: the bias that a well-chosen insider
/// reference makes vanish. Reported, never solved for.
pub fn insider_reference_bias(spec: &TeamGameSpec, team: &TeamSolution, x_a_ref: &DVector<f64>) -> DVector<f64> {
    (&spec.a - &spec.b1 * team.k1.as_matrix()) * x_a_ref - &spec.b1 * &team.k1_offset
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeLabel {
    Cooperative,
    Selfish,
    Adversarial,
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModeLabel::Cooperative => "cooperative",
            ModeLabel::Selfish => "selfish",
            ModeLabel::Adversarial => "adversarial",
        };
        f.write_str(s)
    }
}

/// One insider behavioral mode as seen by the DM.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantMode {
    pub mode_id: u32,
    pub a_sigma: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub d_sigma: DVector<f64>,
    pub label: ModeLabel,
}

impl PlantMode {
    pub fn new(
        mode_id: u32,
        a_sigma: DMatrix<f64>,
        b1: DMatrix<f64>,
        d_sigma: DVector<f64>,
        label: ModeLabel,
    ) -> Result<Self> {
        let n = a_sigma.nrows();
        if !a_sigma.is_square() || b1.nrows() != n || d_sigma.len() != n || b1.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "mode {mode_id}: A {}x{}, B1 {}x{}, d {}",
                a_sigma.nrows(),
                a_sigma.ncols(),
                b1.nrows(),
                b1.ncols(),
                d_sigma.len()
            )));
        }
        Ok(PlantMode {
            mode_id,
            a_sigma,
            b1,
            d_sigma,
            label,
        })
    }

    pub fn n(&self) -> usize {
        self.a_sigma.nrows()
    }

    pub fn m(&self) -> usize {
        self.b1.ncols()
    }
}

/// `A_sigma = A - B2 K2_dia`, `d_sigma = -B2 k2_dia`.
pub fn build_plant_mode(
    spec: &TeamGameSpec,
    k2_dia: &GainMatrix,
    k2_dia_offset: &DVector<f64>,
    mode_id: u32,
    label: ModeLabel,
) -> Result<PlantMode> {
    let n = spec.n();
    if k2_dia.ncols() != n || k2_dia.nrows() != spec.b2.ncols() || k2_dia_offset.len() != spec.b2.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "insider gain {}x{} / offset {} incompatible with B2 {}x{}",
            k2_dia.nrows(),
            k2_dia.ncols(),
            k2_dia_offset.len(),
            spec.b2.nrows(),
            spec.b2.ncols()
        )));
    }
    let a_sigma = &spec.a - &spec.b2 * k2_dia.as_matrix();
    let d_sigma = -(&spec.b2 * k2_dia_offset);
    PlantMode::new(mode_id, a_sigma, spec.b1.clone(), d_sigma, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub t: f64,
    pub mode: u32,
}

/// Piecewise-constant insider mode with a minimum dwell time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingSignal {
    events: Vec<SwitchEvent>,
    dwell_min: f64,
}

impl SwitchingSignal {
    pub fn new(events: Vec<SwitchEvent>, dwell_min: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if events.is_empty() {
            problems.push("switching signal needs at least one event".to_string());
        } else if events[0].t != 0.0 {
            problems.push(format!("first event must be at t = 0, got {}", events[0].t));
        }
        if !(dwell_min > 0.0 && dwell_min.is_finite()) {
            problems.push(format!("dwell_min must be positive, got {dwell_min}"));
        }
        for (i, pair) in events.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            if b.t <= a.t {
                problems.push(format!(
                    "events {} (t = {}) and {} (t = {}) are not strictly increasing",
                    i + 1,
                    a.t,
                    i + 2,
                    b.t
                ));
            } else if b.t - a.t < dwell_min - 1e-12 {
                problems.push(format!(
                    "events {} (t = {}) and {} (t = {}) violate dwell_min = {}",
                    i + 1,
                    a.t,
                    i + 2,
                    b.t,
                    dwell_min
                ));
            }
        }
        if problems.is_empty() {
            Ok(SwitchingSignal { events, dwell_min })
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Single mode active forever.
    pub fn constant(mode: u32, dwell_min: f64) -> Result<Self> {
        Self::new(vec![SwitchEvent { t: 0.0, mode }], dwell_min)
    }

    pub fn events(&self) -> &[SwitchEvent] {
        &self.events
    }

    pub fn dwell_min(&self) -> f64 {
        self.dwell_min
    }

    pub fn mode_at(&self, t: f64) -> u32 {
        let idx = self.events.partition_point(|e| e.t <= t);
        self.events[idx.saturating_sub(1)].mode
    }

    /// Index `j` of the interval `[t_j, t_{j+1})` containing `t`.
    pub fn interval_index(&self, t: f64) -> usize {
        self.events.partition_point(|e| e.t <= t).saturating_sub(1)
    }

    /// `(t_j, t_{j+1}, mode)` with `t_{J+1} = +inf`.
    pub fn intervals(&self) -> Vec<(f64, f64, u32)> {
        self.events
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let end = self.events.get(i + 1).map_or(f64::INFINITY, |n| n.t);
                (e.t, end, e.mode)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_game(x_ref: f64) -> TeamGameSpec {
        TeamGameSpec {
            a: scalar(0.0),
            b1: scalar(1.0),
            b2: scalar(1.0),
            qc: SymMatrix::identity(1),
            r1: SymMatrix::identity(1),
            r2: SymMatrix::identity(1),
            x_c_ref: DVector::from_element(1, x_ref),
        }
    }

    #[test]
    fn scalar_team_solution() {
        // 1 - 2 p^2 = 0
        let sol = team_optimal_solution(&scalar_game(0.0)).unwrap();
        let p = 1.0 / 2f64.sqrt();
        assert!((sol.p_star[(0, 0)] - p).abs() < 1e-10);
        assert!((sol.k1[(0, 0)] - p).abs() < 1e-10);
        assert!((sol.k2[(0, 0)] - p).abs() < 1e-10);
        assert_eq!(sol.k1_offset[0], 0.0);
        assert_eq!(sol.k2_offset[0], 0.0);
    }

    #[test]
    fn team_offsets_follow_reference() {
        let sol = team_optimal_solution(&scalar_game(3.0)).unwrap();
        assert!((sol.k1_offset[0] + sol.k1[(0, 0)] * 3.0).abs() < 1e-14);
    }

    #[test]
    fn unstabilizable_game_is_rejected() {
        let mut spec = scalar_game(0.0);
        spec.a = scalar(1.0);
        spec.b1 = scalar(0.0);
        spec.b2 = scalar(0.0);
        assert!(matches!(team_optimal_solution(&spec), Err(Error::NotStabilizable(_))));
    }

    #[test]
    fn scalar_insider_matches_newton_root() {
        let spec = scalar_game(0.0);
        let team = team_optimal_solution(&spec).unwrap();
        let obj = InsiderObjective {
            qa: SymMatrix::identity(1),
            r2_tilde: SymMatrix::identity(1),
            rho_discipline: 1.0,
            x_a_ref: DVector::zeros(1),
        };
        let resp = insider_best_response(&spec, &obj, &team.k1, &team.k2).unwrap();

        // Scalar Newton on f(p) = 2 a p + qa + rho k^2 - (p + rho k)^2 / (r + rho),
        // started from a large p so it lands on the stabilizing root.
        let a = -team.k1[(0, 0)];
        let k = team.k2[(0, 0)];
        let (qa, r, rho) = (1.0, 1.0, 1.0);
        let f = |p: f64| 2.0 * a * p + qa + rho * k * k - (p + rho * k).powi(2) / (r + rho);
        let df = |p: f64| 2.0 * a - 2.0 * (p + rho * k) / (r + rho);
        let mut p = 100.0;
        for _ in 0..100 {
            p -= f(p) / df(p);
        }
        let expected = (p + rho * k) / (r + rho);
        assert!((resp.k2_dia[(0, 0)] - expected).abs() < 1e-8);
        assert!(insider_are_residual(&spec, &obj, &team.k1, &team.k2, resp.p2.as_matrix()) < 1e-8);
    }

    #[test]
    fn zero_insider_reference_gives_zero_offset() {
        let spec = scalar_game(2.0);
        let team = team_optimal_solution(&spec).unwrap();
        let obj = InsiderObjective {
            qa: SymMatrix::identity(1),
            r2_tilde: SymMatrix::identity(1),
            rho_discipline: 0.5,
            x_a_ref: DVector::zeros(1),
        };
        let resp = insider_best_response(&spec, &obj, &team.k1, &team.k2).unwrap();
        assert_eq!(resp.k2_dia_offset[0], 0.0);
    }

    #[test]
    fn plant_mode_without_insider_feedback_is_nominal() {
        let spec = scalar_game(0.0);
        let mode = build_plant_mode(
            &spec,
            &GainMatrix::zeros(1, 1),
            &DVector::zeros(1),
            1,
            ModeLabel::Cooperative,
        )
        .unwrap();
        assert_eq!(mode.a_sigma, spec.a);
        assert_eq!(mode.d_sigma[0], 0.0);
    }

    #[test]
    fn plant_mode_dimension_mismatch() {
        let spec = scalar_game(0.0);
        let err = build_plant_mode(
            &spec,
            &GainMatrix::zeros(1, 2),
            &DVector::zeros(1),
            1,
            ModeLabel::Selfish,
        );
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn switching_signal_validation() {
        let ev = |t, mode| SwitchEvent { t, mode };
        assert!(SwitchingSignal::new(vec![ev(0.0, 1), ev(24.0, 2), ev(48.0, 3)], 24.0).is_ok());
        let err = SwitchingSignal::new(vec![ev(0.0, 1), ev(30.0, 2), ev(20.0, 3)], 5.0).unwrap_err();
        match err {
            Error::Validation(p) => assert!(p[0].contains("not strictly increasing"), "{p:?}"),
            other => panic!("{other:?}"),
        }
        assert!(SwitchingSignal::new(vec![ev(0.0, 1), ev(10.0, 2)], 24.0).is_err());
        assert!(SwitchingSignal::new(vec![ev(1.0, 1)], 24.0).is_err());
    }

    #[test]
    fn switching_signal_lookup() {
        let ev = |t, mode| SwitchEvent { t, mode };
        let s = SwitchingSignal::new(vec![ev(0.0, 1), ev(24.0, 2), ev(48.0, 3)], 24.0).unwrap();
        assert_eq!(s.mode_at(0.0), 1);
        assert_eq!(s.mode_at(23.999), 1);
        assert_eq!(s.mode_at(24.0), 2);
        assert_eq!(s.mode_at(1e6), 3);
        assert_eq!(s.interval_index(30.0), 1);
        assert_eq!(s.intervals()[2].1, f64::INFINITY);
    }

    #[test]
    fn double_integrator_matches_sign_function_oracle() {
        let spec = TeamGameSpec {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b1: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            b2: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            qc: SymMatrix::identity(2),
            r1: SymMatrix::identity(1),
            r2: SymMatrix::identity(1),
            x_c_ref: DVector::zeros(2),
        };
        let sol = team_optimal_solution(&spec).unwrap();
        let oracle = linalg::care_sign_function(&spec.a, &spec.joint_input(), &spec.qc, &spec.joint_weight()).unwrap();
        assert!((sol.p_star.as_matrix() - oracle.as_matrix()).amax() < 1e-6);
        let res = linalg::are_residual(
            &spec.a,
            &spec.joint_input(),
            &spec.qc,
            &spec.joint_weight(),
            sol.p_star.as_matrix(),
        )
        .unwrap();
        assert!(res < 1e-8);
    }

    #[test]
    fn heavy_discipline_recovers_cooperative_gain() {
        let spec = TeamGameSpec {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]),
            b1: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            b2: DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            qc: SymMatrix::from_diagonal(&[2.0, 1.0]),
            r1: SymMatrix::identity(1),
            r2: SymMatrix::identity(1),
            x_c_ref: DVector::from_vec(vec![1.0, 0.0]),
        };
        let team = team_optimal_solution(&spec).unwrap();
        let obj = InsiderObjective {
            qa: spec.qc.clone(),
            r2_tilde: SymMatrix::identity(1),
            rho_discipline: 1e8,
            x_a_ref: spec.x_c_ref.clone(),
        };
        let resp = insider_best_response(&spec, &obj, &team.k1, &team.k2).unwrap();
        assert!(resp.k2_dia.relative_error(&team.k2) < 1e-3);
        let acl = &spec.a - &spec.b1 * team.k1.as_matrix() - &spec.b2 * resp.k2_dia.as_matrix();
        assert!(is_hurwitz(&acl));
    }
}
