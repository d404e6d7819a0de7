//! Scenario files: TOML with one table per concern and matrices as row
//! lists.
//!
//! ```toml
//! [scenario]
//! name = "example"
//!
//! [reference]
//! C = [[1.0, 0.0, 0.0]]
//! x_d = [73.0]
//!
//! [mode.1]
//! kind = "raw"
//! label = "cooperative"
//! A = [[0.0, 1.0, -1.0], [0.0, 0.0, 0.0], [0.5345, 0.2893, -1.8477]]
//! B1 = [[0.0], [1.0], [0.0]]
//! d = [0.0, 0.0, 18.0]
//!
//! [switching]
//! dwell_min = 24.0
//! events = [{ t = 0.0, mode = 1 }]
//! ```
//!
//! Mode kinds: `raw` (A, B1, d), `augmented` (A_aug, B_aug, d_bar given
//! verbatim), `synth` (insider best response from `[game]`), and `nominal`
//! (the team-optimal insider policy from `[game]`).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::adp::{LearnerConfig, MitigationCost};
use crate::augment::{augment, AugmentedMode, OutputReference};
use crate::error::{Error, Result};
use crate::game::{
    build_plant_mode, insider_best_response, team_optimal_solution, InsiderObjective, ModeLabel, PlantMode,
    SwitchEvent, SwitchingSignal, TeamGameSpec, TeamSolution,
};
use crate::linalg::{lqr_oracle, rows_to_matrix, GainMatrix, SymMatrix};
use crate::sim::{ExplorationNoise, SimConfig};

/// Scenario files shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    (
        "single_adversarial",
        include_str!("../../../scenarios/single_adversarial.toml"),
    ),
    (
        "lane_change_3mode_dt10",
        include_str!("../../../scenarios/lane_change_3mode_dt10.toml"),
    ),
    (
        "lane_change_3mode_dt8",
        include_str!("../../../scenarios/lane_change_3mode_dt8.toml"),
    ),
];

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    scenario: RawMeta,
    game: Option<RawGame>,
    reference: Option<RawReference>,
    #[serde(default)]
    mode: BTreeMap<String, RawMode>,
    cost: RawCost,
    switching: RawSwitching,
    sim: RawSim,
    learner: RawLearner,
    #[serde(default)]
    noise: RawNoise,
    #[serde(default)]
    analysis: AnalysisConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    name: String,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    #[serde(rename = "A")]
    a: Rows,
    #[serde(rename = "B1")]
    b1: Rows,
    #[serde(rename = "B2")]
    b2: Rows,
    #[serde(rename = "Qc")]
    qc: Rows,
    #[serde(rename = "R1")]
    r1: Rows,
    #[serde(rename = "R2")]
    r2: Rows,
    x_c_ref: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    #[serde(rename = "C")]
    c: Rows,
    #[serde(rename = "E")]
    e: Option<Rows>,
    x_d: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawMode {
    Raw {
        label: ModeLabel,
        #[serde(rename = "A")]
        a: Rows,
        #[serde(rename = "B1")]
        b1: Rows,
        d: Vec<f64>,
    },
    Augmented {
        label: ModeLabel,
        #[serde(rename = "A_aug")]
        a_aug: Rows,
        #[serde(rename = "B_aug")]
        b_aug: Rows,
        d_bar: Vec<f64>,
        s: usize,
    },
    Synth {
        label: ModeLabel,
        #[serde(rename = "Qa")]
        qa: Rows,
        #[serde(rename = "R2_tilde")]
        r2_tilde: Rows,
        rho: f64,
        x_a_ref: Vec<f64>,
    },
    Nominal {
        #[serde(default = "cooperative")]
        label: ModeLabel,
    },
}

fn cooperative() -> ModeLabel {
    ModeLabel::Cooperative
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    #[serde(rename = "Q")]
    q: Rows,
    #[serde(rename = "R")]
    r: Rows,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSwitching {
    dwell_min: f64,
    events: Vec<SwitchEvent>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    #[serde(default = "default_step")]
    step: f64,
    t_end: f64,
    warm_start: Option<f64>,
    #[serde(default = "default_blowup")]
    blowup: f64,
    /// Full augmented initial state.
    initial_state: Option<Vec<f64>>,
    /// Plant part of the initial state; the integral part defaults to the
    /// value giving zero initial input under the initial gain.
    x0: Option<Vec<f64>>,
    z0: Option<Vec<f64>>,
}

fn default_step() -> f64 {
    1e-3
}

fn default_blowup() -> f64 {
    1e9
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearner {
    #[serde(flatten)]
    cfg: RawLearnerCfg,
    /// Mode whose oracle gain starts the first phase.
    initial_gain_mode: Option<u32>,
    initial_gain: Option<Rows>,
}

#[derive(Debug, Deserialize)]
struct RawLearnerCfg {
    eps: Option<f64>,
    max_policy_iters: Option<usize>,
    inter_learning_interval: f64,
    rank_tol: Option<f64>,
    p_min: Option<usize>,
    max_windows: Option<usize>,
    tau: f64,
    delta_tau: f64,
    zeta_max: Option<f64>,
    quadrature: Option<crate::sim::Quadrature>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    #[serde(default = "default_terms")]
    num_terms: usize,
    #[serde(default = "default_freq")]
    freq_range: [f64; 2],
    #[serde(default = "default_amp")]
    amplitude: f64,
    #[serde(default)]
    seed: u64,
}

impl Default for RawNoise {
    fn default() -> Self {
        RawNoise {
            num_terms: default_terms(),
            freq_range: default_freq(),
            amplitude: default_amp(),
            seed: 0,
        }
    }
}

fn default_terms() -> usize {
    100
}

fn default_freq() -> [f64; 2] {
    [-50.0, 50.0]
}

fn default_amp() -> f64 {
    1.0
}

/// Settings for the oracle analysis of a run.
#[derive(Debug, Clone, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub oracle: bool,
    /// Lower bound on the first state component (spacing) checked in the report.
    pub safety_floor: Option<f64>,
    #[serde(default = "default_slack")]
    pub bound_slack: f64,
    /// Relative gain error under which a learned gain counts as optimal.
    #[serde(default = "default_gain_tol")]
    pub gain_tol: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            oracle: false,
            safety_floor: None,
            bound_slack: default_slack(),
            gain_tol: default_gain_tol(),
        }
    }
}

fn default_slack() -> f64 {
    0.05
}

fn default_gain_tol() -> f64 {
    5e-2
}

/// Team game with its cooperative solution.
#[derive(Debug, Clone)]
pub struct GameSetup {
    pub spec: TeamGameSpec,
    pub team: TeamSolution,
}

impl GameSetup {
    /// The DM's team-optimal policy in augmented coordinates: gain
    /// `[K1*, 0]` with offset `-k1*`.
    pub fn cooperative_policy(&self, q: usize) -> (GainMatrix, DVector<f64>) {
        let k1 = self.team.k1.as_matrix();
        let mut k = DMatrix::zeros(k1.nrows(), q);
        k.view_mut((0, 0), k1.shape()).copy_from(k1);
        (GainMatrix::new(k).expect("finite"), -&self.team.k1_offset)
    }
}

/// Validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub n: usize,
    pub s: usize,
    pub m: usize,
    pub game: Option<GameSetup>,
    pub reference: Option<OutputReference>,
    /// Every defined mode, including ones absent from the switching signal.
    pub modes: Vec<AugmentedMode>,
    pub cost: MitigationCost,
    pub signal: SwitchingSignal,
    pub sim: SimConfig,
    pub learner: LearnerConfig,
    pub initial_gain: GainMatrix,
    pub noise: ExplorationNoise,
    pub analysis: AnalysisConfig,
    /// Original file text.
    pub source: String,
}

impl Scenario {
    pub fn q(&self) -> usize {
        self.n + self.s
    }

    pub fn mode(&self, id: u32) -> Option<&AugmentedMode> {
        self.modes.iter().find(|m| m.mode_id == id)
    }

    /// Modes in order of first activation.
    pub fn active_modes(&self) -> Vec<&AugmentedMode> {
        let mut ids: Vec<u32> = Vec::new();
        for e in self.signal.events() {
            if !ids.contains(&e.mode) {
                ids.push(e.mode);
            }
        }
        ids.iter().filter_map(|&id| self.mode(id)).collect()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise.seed = seed;
        self
    }
}

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Loads a scenario from a file path, or a bundled scenario by name.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    if !path.exists() {
        if let Some(text) = path.to_str().and_then(bundled) {
            return parse_scenario(text, path.to_str().unwrap_or("scenario"));
        }
    }
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text, &path.display().to_string())
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| {
        let location = match e.span() {
            Some(span) => {
                let (l, c) = line_col(text, span.start);
                format!("{origin}:{l}:{c}")
            }
            None => origin.to_string(),
        };
        Error::Parse {
            location,
            message: e.message().to_string(),
        }
    })?;
    build(raw, text)
}

struct Problems(Vec<String>);

impl Problems {
    fn matrix(&mut self, field: &str, rows: &Rows) -> Option<DMatrix<f64>> {
        match rows_to_matrix(rows) {
            Ok(m) => Some(m),
            Err(e) => {
                self.0.push(format!("{field}: {e}"));
                None
            }
        }
    }

    fn sym(&mut self, field: &str, rows: &Rows) -> Option<SymMatrix> {
        let m = self.matrix(field, rows)?;
        match SymMatrix::new(m) {
            Ok(s) => Some(s),
            Err(e) => {
                self.0.push(format!("{field}: {e}"));
                None
            }
        }
    }

    fn shape(&mut self, field: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> bool {
        if m.shape() != (rows, cols) {
            self.0.push(format!(
                "{field}: expected {rows}x{cols}, got {}x{}",
                m.nrows(),
                m.ncols()
            ));
            false
        } else {
            true
        }
    }

    fn len(&mut self, field: &str, v: &[f64], n: usize) -> bool {
        if v.len() != n {
            self.0.push(format!("{field}: expected length {n}, got {}", v.len()));
            false
        } else {
            true
        }
    }

    fn lift<T>(&mut self, ctx: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(Error::Validation(ps)) => {
                self.0.extend(ps.into_iter().map(|p| format!("{ctx}: {p}")));
                None
            }
            Err(e) => {
                self.0.push(format!("{ctx}: {e}"));
                None
            }
        }
    }

    fn finish(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self.0))
        }
    }
}

fn build(raw: RawScenario, text: &str) -> Result<Scenario> {
    let mut pr = Problems(Vec::new());

    let game = raw.game.as_ref().and_then(|g| {
        let spec = TeamGameSpec {
            a: pr.matrix("game.A", &g.a)?,
            b1: pr.matrix("game.B1", &g.b1)?,
            b2: pr.matrix("game.B2", &g.b2)?,
            qc: pr.sym("game.Qc", &g.qc)?,
            r1: pr.sym("game.R1", &g.r1)?,
            r2: pr.sym("game.R2", &g.r2)?,
            x_c_ref: DVector::from_vec(g.x_c_ref.clone()),
        };
        let team = pr.lift("game", team_optimal_solution(&spec))?;
        Some(GameSetup { spec, team })
    });

    let reference = raw.reference.as_ref().and_then(|r| {
        let c = pr.matrix("reference.C", &r.c)?;
        let x_d = DVector::from_vec(r.x_d.clone());
        let res = match &r.e {
            Some(e) => {
                let e = pr.matrix("reference.E", e)?;
                OutputReference::with_injection(c, e, x_d)
            }
            None => OutputReference::new(c, x_d),
        };
        pr.lift("reference", res)
    });

    if raw.mode.is_empty() {
        pr.0.push("at least one [mode.N] table is required".into());
    }
    let mut modes = Vec::new();
    for (key, rm) in &raw.mode {
        let ctx = format!("mode.{key}");
        let Ok(id) = key.parse::<u32>() else {
            pr.0.push(format!("{ctx}: mode keys must be non-negative integers"));
            continue;
        };
        let needs_ref = !matches!(rm, RawMode::Augmented { .. });
        let plant: Option<PlantMode> = match rm {
            RawMode::Raw { label, a, b1, d } => (|| {
                let a = pr.matrix(&format!("{ctx}.A"), a)?;
                let b1 = pr.matrix(&format!("{ctx}.B1"), b1)?;
                pr.lift(&ctx, PlantMode::new(id, a, b1, DVector::from_vec(d.clone()), *label))
            })(),
            RawMode::Synth {
                label,
                qa,
                r2_tilde,
                rho,
                x_a_ref,
            } => match &game {
                None => {
                    if raw.game.is_none() {
                        pr.0.push(format!("{ctx}: kind = \"synth\" requires a [game] table"));
                    }
                    None
                }
                Some(g) => (|| {
                    let obj = InsiderObjective {
                        qa: pr.sym(&format!("{ctx}.Qa"), qa)?,
                        r2_tilde: pr.sym(&format!("{ctx}.R2_tilde"), r2_tilde)?,
                        rho_discipline: *rho,
                        x_a_ref: DVector::from_vec(x_a_ref.clone()),
                    };
                    let resp = pr.lift(&ctx, insider_best_response(&g.spec, &obj, &g.team.k1, &g.team.k2))?;
                    pr.lift(
                        &ctx,
                        build_plant_mode(&g.spec, &resp.k2_dia, &resp.k2_dia_offset, id, *label),
                    )
                })(),
            },
            RawMode::Nominal { label } => match &game {
                None => {
                    if raw.game.is_none() {
                        pr.0.push(format!("{ctx}: kind = \"nominal\" requires a [game] table"));
                    }
                    None
                }
                Some(g) => pr.lift(
                    &ctx,
                    build_plant_mode(&g.spec, &g.team.k2, &g.team.k2_offset, id, *label),
                ),
            },
            RawMode::Augmented { .. } => None,
        };
        let aug = match rm {
            RawMode::Augmented {
                label,
                a_aug,
                b_aug,
                d_bar,
                s,
            } => (|| {
                let a = pr.matrix(&format!("{ctx}.A_aug"), a_aug)?;
                let b = pr.matrix(&format!("{ctx}.B_aug"), b_aug)?;
                pr.lift(
                    &ctx,
                    AugmentedMode::from_parts(id, *label, a, b, DVector::from_vec(d_bar.clone()), *s),
                )
            })(),
            _ => match (&plant, &reference) {
                (Some(p), Some(r)) => pr.lift(&ctx, augment(p, r)),
                (Some(_), None) if needs_ref => {
                    pr.0.push(format!("{ctx}: a [reference] table is required to augment this mode"));
                    None
                }
                _ => None,
            },
        };
        if let Some(a) = aug {
            modes.push(a);
        }
    }

    let (n, s, m) = modes.first().map_or((0, 0, 0), |a| (a.n(), a.s(), a.m()));
    for a in &modes {
        if (a.n(), a.s(), a.m()) != (n, s, m) {
            pr.0.push(format!(
                "mode.{}: dimensions (n, s, m) = ({}, {}, {}) differ from ({n}, {s}, {m})",
                a.mode_id,
                a.n(),
                a.s(),
                a.m()
            ));
        }
    }
    let q = n + s;

    let signal = pr.lift(
        "switching",
        SwitchingSignal::new(raw.switching.events.clone(), raw.switching.dwell_min),
    );
    for e in &raw.switching.events {
        if !raw.mode.contains_key(&e.mode.to_string()) {
            pr.0.push(format!(
                "switching: event at t = {} refers to undefined mode {}",
                e.t, e.mode
            ));
        }
    }

    let cost = (|| {
        let qw = pr.sym("cost.Q", &raw.cost.q)?;
        let r = pr.sym("cost.R", &raw.cost.r)?;
        if !modes.is_empty() {
            pr.shape("cost.Q", &qw, q, q);
            pr.shape("cost.R", &r, m, m);
        }
        if !qw.is_positive_definite() || !r.is_positive_definite() {
            pr.0.push("cost: Q and R must be positive definite".into());
        }
        Some(MitigationCost { q: qw, r })
    })();

    let lc = &raw.learner.cfg;
    let mut learner = LearnerConfig::new(lc.tau, lc.delta_tau, lc.inter_learning_interval);
    if let Some(v) = lc.eps {
        learner.eps = v;
    }
    if let Some(v) = lc.max_policy_iters {
        learner.max_policy_iters = v;
    }
    if let Some(v) = lc.rank_tol {
        learner.rank_tol = v;
    }
    if let Some(v) = lc.p_min {
        learner.p_min = v;
    }
    learner.max_windows = lc.max_windows.unwrap_or(10 * learner.p_min);
    learner.zeta_max = lc.zeta_max;
    if let Some(v) = lc.quadrature {
        learner.quadrature = v;
    }
    if !modes.is_empty() {
        pr.lift("learner", learner.validate(q, m));
    }

    let noise = ExplorationNoise {
        num_terms: raw.noise.num_terms,
        freq_range: (raw.noise.freq_range[0], raw.noise.freq_range[1]),
        amplitude: raw.noise.amplitude,
        seed: raw.noise.seed,
    };
    pr.lift("noise", noise.validate());

    let initial_gain = match (&raw.learner.initial_gain, raw.learner.initial_gain_mode) {
        (Some(_), Some(_)) => {
            pr.0.push("learner: give either initial_gain or initial_gain_mode, not both".into());
            None
        }
        (Some(rows), None) => pr.matrix("learner.initial_gain", rows).and_then(|k| {
            pr.shape("learner.initial_gain", &k, m, q)
                .then(|| pr.lift("learner.initial_gain", GainMatrix::new(k)))
                .flatten()
        }),
        (None, Some(id)) => match modes.iter().find(|a| a.mode_id == id) {
            None => {
                pr.0.push(format!("learner.initial_gain_mode: undefined mode {id}"));
                None
            }
            Some(a) => {
                let r = SymMatrix::identity(m);
                let qw = cost.as_ref().map_or_else(|| SymMatrix::identity(q), |c| c.q.clone());
                let r = cost.as_ref().map_or(r, |c| c.r.clone());
                pr.lift(
                    "learner.initial_gain_mode",
                    lqr_oracle(&a.a_aug, &a.b_aug, &qw, &r).map(|s| s.k),
                )
            }
        },
        (None, None) => {
            pr.0.push("learner: initial_gain or initial_gain_mode is required".into());
            None
        }
    };

    let rs = &raw.sim;
    let initial_state = match (&rs.initial_state, &rs.x0) {
        (Some(_), Some(_)) => {
            pr.0.push("sim: give either initial_state or x0, not both".into());
            None
        }
        (Some(v), None) => pr.len("sim.initial_state", v, q).then(|| DVector::from_vec(v.clone())),
        (None, Some(x0)) => {
            if !pr.len("sim.x0", x0, n) {
                None
            } else {
                let x0 = DVector::from_vec(x0.clone());
                let z0 = match &rs.z0 {
                    Some(z) => pr.len("sim.z0", z, s).then(|| DVector::from_vec(z.clone())),
                    None => initial_gain.as_ref().and_then(|k| match bumpless_integral(k, &x0, n) {
                        Ok(z) => Some(z),
                        Err(e) => {
                            pr.0.push(format!("sim: {e}"));
                            None
                        }
                    }),
                };
                z0.map(|z| {
                    let mut v = DVector::zeros(q);
                    v.rows_mut(0, n).copy_from(&x0);
                    v.rows_mut(n, s).copy_from(&z);
                    v
                })
            }
        }
        (None, None) => {
            pr.0.push("sim: initial_state or x0 is required".into());
            None
        }
    };
    let sim = initial_state.map(|initial_state| SimConfig {
        step: rs.step,
        t_end: rs.t_end,
        initial_state,
        warm_start: rs.warm_start.unwrap_or(2.0 * learner.tau),
        blowup: rs.blowup,
    });
    if let Some(c) = &sim {
        pr.lift("sim", c.validate());
        if c.warm_start < learner.tau {
            pr.0.push(format!(
                "sim: warm_start {} is shorter than tau {}",
                c.warm_start, learner.tau
            ));
        }
        if crate::augment::delay_steps(learner.tau, c.step).is_err() {
            pr.0.push(format!(
                "learner: tau = {} is not a multiple of the step {}",
                learner.tau, c.step
            ));
        }
        if crate::augment::delay_steps(learner.delta_tau, c.step).is_err() {
            pr.0.push(format!(
                "learner: delta_tau = {} is not a multiple of the step {}",
                learner.delta_tau, c.step
            ));
        }
    }
    if !(raw.analysis.bound_slack >= 0.0 && raw.analysis.gain_tol > 0.0) {
        pr.0.push("analysis: bound_slack must be >= 0 and gain_tol > 0".into());
    }

    pr.finish()?;
    Ok(Scenario {
        name: raw.scenario.name,
        description: raw.scenario.description,
        n,
        s,
        m,
        game,
        reference,
        modes,
        cost: cost.expect("validated"),
        signal: signal.expect("validated"),
        sim: sim.expect("validated"),
        learner,
        initial_gain: initial_gain.expect("validated"),
        noise,
        analysis: raw.analysis,
        source: text.to_string(),
    })
}

/// Integral state making `u(0) = -K xi(0)` vanish (least squares when the
/// integral block of `K` is not square).
pub fn bumpless_integral(k: &GainMatrix, x0: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    let km = k.as_matrix();
    let kx = km.columns(0, n);
    let kz = km.columns(n, km.ncols() - n).clone_owned();
    let rhs = -(kx * x0);
    let svd = kz.svd(true, true);
    svd.solve(&rhs, 1e-12)
        .map_err(|e| Error::SingularSystem(format!("integral initial state: {e}")))
}
