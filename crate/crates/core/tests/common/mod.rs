#![allow(dead_code)]

use insider_adp::augment::{equilibrium, AugmentedMode};
use insider_adp::game::SwitchingSignal;
use insider_adp::linalg::{care_sign_function, eigenvalues, is_stabilizable, GainMatrix, SymMatrix};
use insider_adp::scenario::{bundled, parse_scenario, Scenario};
use insider_adp::sim::{simulate, ExplorationNoise, Policy, SimConfig, TrajectoryLog};
use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario(name: &str) -> Scenario {
    parse_scenario(bundled(name).expect("bundled scenario"), name).expect("valid scenario")
}

pub fn lane_mode(id: u32) -> (Scenario, AugmentedMode) {
    let sc = scenario("lane_change_3mode_dt10");
    let md = sc.mode(id).expect("mode").clone();
    (sc, md)
}

const P_NORM_MAX: f64 = 1e4;

pub struct RandomSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: SymMatrix,
    pub r: SymMatrix,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Stabilizable pair with positive definite weights; rejection-sampled.
///
/// Near-unstabilizable draws give `|P| ~ 1e5` or more, where an absolute ARE
/// residual of 1e-8 sits below double precision; those are rejected too.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize) -> RandomSystem {
    loop {
        let a = uniform(rng, n, n, 2.0);
        let b = uniform(rng, n, m, 1.5);
        if !is_stabilizable(&a, &b) || pbh_margin(&a, &b) < 0.1 {
            continue;
        }
        let mq = uniform(rng, n, n, 1.0);
        let mr = uniform(rng, m, m, 1.0);
        let q = SymMatrix::symmetrize(mq.transpose() * &mq + DMatrix::identity(n, n) * 0.1);
        let r = SymMatrix::symmetrize(mr.transpose() * &mr + DMatrix::identity(m, m) * 0.5);
        match care_sign_function(&a, &b, &q, &r) {
            Ok(p) if p.as_matrix().norm() <= P_NORM_MAX => return RandomSystem { a, b, q, r },
            _ => continue,
        }
    }
}

/// Smallest singular value of `[lambda I - A, B]` over the eigenvalues with
/// `Re lambda >= 0`; near zero means barely stabilizable and an
/// ill-conditioned Riccati equation.
pub fn pbh_margin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut margin = f64::INFINITY;
    for lambda in eigenvalues(a) {
        if lambda.re < 0.0 {
            continue;
        }
        let mut pbh = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                let diag = if i == j { lambda } else { Complex::new(0.0, 0.0) };
                pbh[(i, j)] = diag - Complex::new(a[(i, j)], 0.0);
            }
            for j in 0..b.ncols() {
                pbh[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        margin = margin.min(pbh.singular_values().min());
    }
    margin
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Single-mode run under a fixed excited gain, starting at `x0`.
pub fn excited_run(
    md: &AugmentedMode,
    k: &GainMatrix,
    x0: DVector<f64>,
    noise: &ExplorationNoise,
    t_end: f64,
    excite_from: f64,
) -> TrajectoryLog {
    let sig = SwitchingSignal::constant(md.mode_id, t_end.max(1.0)).unwrap();
    let cfg = SimConfig {
        step: 1e-3,
        t_end,
        initial_state: x0,
        warm_start: 0.0,
        blowup: 1e9,
    };
    simulate(
        std::slice::from_ref(md),
        &sig,
        |t| Policy::linear(k.clone(), t >= excite_from - 5e-4),
        noise,
        &cfg,
    )
    .unwrap()
}

/// Equilibrium of `md` under `k`, offset by `shift` in every coordinate.
pub fn near_equilibrium(md: &AugmentedMode, k: &GainMatrix, shift: f64) -> DVector<f64> {
    equilibrium(md, k).unwrap().add_scalar(shift)
}

/// Model-based evaluation of `k` followed by one improvement step.
pub fn kleinman_step(md: &AugmentedMode, k: &GainMatrix, q: &SymMatrix, r: &SymMatrix) -> (SymMatrix, GainMatrix) {
    let acl = md.closed_loop(k);
    let qk = SymMatrix::symmetrize(q.as_matrix() + k.transpose() * r.as_matrix() * k.as_matrix());
    let p = insider_adp::linalg::solve_lyapunov(&acl, &qk).unwrap();
    let next = r.as_matrix().clone().try_inverse().unwrap() * md.b_aug.transpose() * p.as_matrix();
    (p, GainMatrix::new(next).unwrap())
}

/// `[svec(P); vec(K)]`.
pub fn unknowns(p: &SymMatrix, k: &GainMatrix) -> DVector<f64> {
    let s = insider_adp::linalg::svec(p.as_matrix());
    let v = insider_adp::linalg::vec(k.as_matrix());
    DVector::from_iterator(s.len() + v.len(), s.iter().chain(v.iter()).copied())
}
