//! Fixed-step simulation of the switched augmented plant and online
//! accumulation of the learning data matrices.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{delay_steps, AugmentedMode, DelayBuffer};
use crate::error::{Error, Result};
use crate::game::SwitchingSignal;
use crate::linalg::{merge_symmetric_columns, svec_len, GainMatrix};

/// Sum-of-sinusoids exploration signal `amp * sum_k sin(w_k t)` per input
/// channel, with frequencies drawn once from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationNoise {
    pub num_terms: usize,
    pub freq_range: (f64, f64),
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for ExplorationNoise {
    fn default() -> Self {
        ExplorationNoise {
            num_terms: 100,
            freq_range: (-50.0, 50.0),
            amplitude: 1.0,
            seed: 0,
        }
    }
}

impl ExplorationNoise {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.freq_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidParameter(format!("bad frequency range [{lo}, {hi}]")));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::InvalidParameter(
                "noise amplitude must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Draws the frequencies for `channels` inputs.
    pub fn realize(&self, channels: usize) -> NoiseSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.freq_range;
        let freqs = (0..channels)
            .map(|_| {
                (0..self.num_terms)
                    .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
                    .collect()
            })
            .collect();
        NoiseSignal {
            freqs,
            amplitude: self.amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSignal {
    freqs: Vec<Vec<f64>>,
    amplitude: f64,
}

impl NoiseSignal {
    pub fn channels(&self) -> usize {
        self.freqs.len()
    }

    pub fn frequencies(&self) -> &[Vec<f64>] {
        &self.freqs
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.freqs.len(),
            self.freqs
                .iter()
                .map(|w| self.amplitude * w.iter().map(|wk| (wk * t).sin()).sum::<f64>()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub step: f64,
    pub t_end: f64,
    #[serde(with = "crate::linalg::vector")]
    pub initial_state: DVector<f64>,
    pub warm_start: f64,
    #[serde(default = "default_blowup")]
    pub blowup: f64,
}

fn default_blowup() -> f64 {
    1e9
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.step > 0.0 && self.step.is_finite()) {
            problems.push(format!("step must be positive, got {}", self.step));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            problems.push(format!("t_end must be positive, got {}", self.t_end));
        }
        if !(self.warm_start >= 0.0 && self.warm_start.is_finite()) {
            problems.push(format!("warm_start must be >= 0, got {}", self.warm_start));
        }
        if !(self.blowup > 0.0) {
            problems.push("blowup bound must be positive".into());
        }
        if self.initial_state.iter().any(|v| !v.is_finite()) {
            problems.push("initial_state must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.step).round() as usize
    }
}

/// Affine state feedback `u = -K xi + offset (+ e0(t) when excited)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub gain: GainMatrix,
    pub offset: DVector<f64>,
    pub excite: bool,
}

impl Policy {
    pub fn linear(gain: GainMatrix, excite: bool) -> Self {
        let m = gain.nrows();
        Policy {
            gain,
            offset: DVector::zeros(m),
            excite,
        }
    }

    fn input(&self, xi: &DVector<f64>, t: f64, noise: &NoiseSignal) -> DVector<f64> {
        let mut u = &self.offset - self.gain.as_matrix() * xi;
        if self.excite {
            u += noise.eval(t);
        }
        u
    }
}

/// Uniform-grid record of `(t, xi, u, mode)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub t: Vec<f64>,
    pub xi: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub mode: Vec<u32>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn step(&self) -> Option<f64> {
        (self.t.len() >= 2).then(|| self.t[1] - self.t[0])
    }

    /// Index of the grid point nearest to `t`.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        let h = self.step()?;
        let k = ((t - self.t[0]) / h).round();
        (k >= 0.0 && (k as usize) < self.len()).then_some(k as usize)
    }

    pub fn push(&mut self, t: f64, xi: DVector<f64>, u: DVector<f64>, mode: u32) {
        self.t.push(t);
        self.xi.push(xi);
        self.u.push(u);
        self.mode.push(mode);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let q = self.xi.first().map_or(0, |x| x.len());
        let m = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=q).map(|i| format!("xi_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.push("mode".into());
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for k in 0..self.len() {
            line.clear();
            line.push_str(&format!("{:.16e}", self.t[k]));
            for v in self.xi[k].iter().chain(self.u[k].iter()) {
                line.push_str(&format!(",{v:.16e}"));
            }
            line.push_str(&format!(",{}", self.mode[k]));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty trajectory file"))??;
        let cols: Vec<&str> = header.split(',').collect();
        let q = cols.iter().filter(|c| c.starts_with("xi_")).count();
        let m = cols.iter().filter(|c| c.starts_with("u_")).count();
        if cols.first() != Some(&"t") || cols.last() != Some(&"mode") || cols.len() != q + m + 2 {
            return Err(parse_err(1, "header must be t,xi_1..xi_q,u_1..u_m,mode"));
        }
        let mut log = TrajectoryLog::default();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != q + m + 2 {
                return Err(parse_err(i + 2, "wrong number of fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(i + 2, &e.to_string()));
            let t = num(fields[0])?;
            let xi = fields[1..=q].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let u = fields[q + 1..=q + m]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>>>()?;
            let mode = fields[q + m + 1]
                .parse::<u32>()
                .map_err(|e| parse_err(i + 2, &e.to_string()))?;
            log.push(t, DVector::from_vec(xi), DVector::from_vec(u), mode);
        }
        Ok(log)
    }
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse {
        location: format!("trajectory.csv line {line}"),
        message: msg.to_string(),
    }
}

/// Step-by-step RK4 integrator of the switched augmented plant. The mode is
/// taken at the start of each step; switching instants lie on the grid for
/// all bundled scenarios.
pub struct Simulator<'a> {
    modes: &'a [AugmentedMode],
    index: BTreeMap<u32, usize>,
    signal: &'a SwitchingSignal,
    noise: NoiseSignal,
    h: f64,
    blowup: f64,
    k: usize,
    xi: DVector<f64>,
    log: TrajectoryLog,
}

impl<'a> Simulator<'a> {
    pub fn new(
        modes: &'a [AugmentedMode],
        signal: &'a SwitchingSignal,
        noise: NoiseSignal,
        cfg: &SimConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let first = modes
            .first()
            .ok_or_else(|| Error::InvalidParameter("no modes".into()))?;
        let (q, m) = (first.q(), first.m());
        let mut index = BTreeMap::new();
        for (i, md) in modes.iter().enumerate() {
            if md.q() != q || md.m() != m {
                return Err(Error::DimensionMismatch(format!(
                    "mode {} is {}x{}, expected {q}x{m}",
                    md.mode_id,
                    md.q(),
                    md.m()
                )));
            }
            index.insert(md.mode_id, i);
        }
        if let Some(ev) = signal.events().iter().find(|e| !index.contains_key(&e.mode)) {
            return Err(Error::Validation(vec![format!(
                "switching event at t = {} refers to unknown mode {}",
                ev.t, ev.mode
            )]));
        }
        if cfg.initial_state.len() != q {
            return Err(Error::DimensionMismatch(format!(
                "initial state has {} entries, expected {q}",
                cfg.initial_state.len()
            )));
        }
        if noise.channels() != m {
            return Err(Error::DimensionMismatch(format!(
                "noise has {} channels, expected {m}",
                noise.channels()
            )));
        }
        Ok(Simulator {
            modes,
            index,
            signal,
            noise,
            h: cfg.step,
            blowup: cfg.blowup,
            k: 0,
            xi: cfg.initial_state.clone(),
            log: TrajectoryLog::default(),
        })
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.h
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn steps_taken(&self) -> usize {
        self.k
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    pub fn noise(&self) -> &NoiseSignal {
        &self.noise
    }

    fn mode_at(&self, t: f64) -> &AugmentedMode {
        &self.modes[self.index[&self.signal.mode_at(t)]]
    }

    /// Logs the current sample under `policy` and integrates one step.
    pub fn advance(&mut self, policy: &Policy) -> Result<()> {
        let t = self.time();
        let h = self.h;
        let md = self.mode_at(t);
        let (a, b, d) = (&md.a_aug, &md.b_aug, &md.d_bar);
        let noise = &self.noise;
        let f = |tt: f64, x: &DVector<f64>| a * x + b * policy.input(x, tt, noise) + d;

        let x = &self.xi;
        let u = policy.input(x, t, noise);
        let k1 = f(t, x);
        let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
        let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
        let k4 = f(t + h, &(x + &k3 * h));
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let mode_id = md.mode_id;

        self.log.push(t, self.xi.clone(), u, mode_id);
        self.k += 1;
        let norm = next.norm();
        if !norm.is_finite() || norm > self.blowup {
            return Err(Error::Divergence { t: self.time(), norm });
        }
        self.xi = next;
        Ok(())
    }

    /// Logs the final sample and returns the trajectory.
    pub fn finish(mut self, policy: &Policy) -> TrajectoryLog {
        let t = self.time();
        let u = policy.input(&self.xi, t, &self.noise);
        let mode = self.mode_at(t).mode_id;
        self.log.push(t, self.xi.clone(), u, mode);
        self.log
    }
}

/// Runs `cfg.t_end` seconds under a time-varying policy.
pub fn simulate<F>(
    modes: &[AugmentedMode],
    signal: &SwitchingSignal,
    mut policy: F,
    noise: &ExplorationNoise,
    cfg: &SimConfig,
) -> Result<TrajectoryLog>
where
    F: FnMut(f64) -> Policy,
{
    noise.validate()?;
    let m = modes.first().map_or(0, |md| md.m());
    let mut sim = Simulator::new(modes, signal, noise.realize(m), cfg)?;
    let n = cfg.steps();
    for _ in 0..n {
        let p = policy(sim.time());
        sim.advance(&p)?;
    }
    let p = policy(sim.time());
    Ok(sim.finish(&p))
}

/// Learning data from `p` consecutive windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    pub q: usize,
    pub m: usize,
    /// `p x q(q+1)/2`: svec-reduced increments of `dxi (x) dxi`.
    pub delta_xx: DMatrix<f64>,
    /// `p x q^2`: trapezoid integrals of `dxi (x) dxi`.
    pub ixx: DMatrix<f64>,
    /// `p x qm`: trapezoid integrals of `dxi (x) du`.
    pub ixu: DMatrix<f64>,
    pub windows: Vec<(f64, f64)>,
}

impl DataBatch {
    pub fn p(&self) -> usize {
        self.windows.len()
    }

    pub fn zeros(q: usize, m: usize, p: usize) -> Self {
        DataBatch {
            q,
            m,
            delta_xx: DMatrix::zeros(p, svec_len(q)),
            ixx: DMatrix::zeros(p, q * q),
            ixu: DMatrix::zeros(p, q * m),
            windows: vec![(0.0, 0.0); p],
        }
    }
}

/// Quadrature rule for the window integrals on the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    Trapezoid,
    /// Composite Simpson; needs an even number of steps per window.
    #[default]
    Simpson,
}

impl Quadrature {
    /// Weight of local sample `l` in a window of `w` steps of size `h`.
    fn weight(self, l: usize, w: usize, h: f64) -> f64 {
        let end = l == 0 || l == w;
        match self {
            Quadrature::Trapezoid => {
                if end {
                    0.5 * h
                } else {
                    h
                }
            }
            Quadrature::Simpson => {
                if end {
                    h / 3.0
                } else if l % 2 == 1 {
                    4.0 * h / 3.0
                } else {
                    2.0 * h / 3.0
                }
            }
        }
    }
}

/// Online accumulator: feed uniformly spaced samples, windows of length
/// `delta_tau` tile the stream from `collect_start`.
#[derive(Debug, Clone)]
pub struct BatchBuilder {
    q: usize,
    m: usize,
    h: f64,
    buffer: DelayBuffer,
    collect_start: f64,
    window_steps: usize,
    rule: Quadrature,
    pos: Option<usize>,
    start_outer: DVector<f64>,
    acc_xx: DVector<f64>,
    acc_xu: DVector<f64>,
    rows_dxx: Vec<DVector<f64>>,
    rows_xx: Vec<DVector<f64>>,
    rows_xu: Vec<DVector<f64>>,
    windows: Vec<(f64, f64)>,
}

impl BatchBuilder {
    pub fn new(
        q: usize,
        m: usize,
        tau: f64,
        delta_tau: f64,
        step: f64,
        collect_start: f64,
        rule: Quadrature,
    ) -> Result<Self> {
        let window_steps = delay_steps(delta_tau, step)?;
        if rule == Quadrature::Simpson && window_steps % 2 == 1 {
            return Err(Error::InvalidParameter(format!(
                "Simpson quadrature needs an even number of steps per window, got {window_steps}"
            )));
        }
        let buffer = DelayBuffer::new(tau, step, window_steps + 1)?;
        Ok(BatchBuilder {
            q,
            m,
            h: step,
            buffer,
            collect_start,
            window_steps,
            rule,
            pos: None,
            start_outer: DVector::zeros(q * q),
            acc_xx: DVector::zeros(q * q),
            acc_xu: DVector::zeros(q * m),
            rows_dxx: Vec::new(),
            rows_xx: Vec::new(),
            rows_xu: Vec::new(),
            windows: Vec::new(),
        })
    }

    pub fn completed(&self) -> usize {
        self.windows.len()
    }

    pub fn push(&mut self, t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if xi.len() != self.q || u.len() != self.m {
            return Err(Error::DimensionMismatch(format!(
                "sample has q = {}, m = {}; expected {}, {}",
                xi.len(),
                u.len(),
                self.q,
                self.m
            )));
        }
        self.buffer.push(t, xi.clone(), u.clone());
        if t < self.collect_start - 0.5 * self.h {
            return Ok(());
        }
        let (dxi, du) = self.buffer.incremental(t)?;
        let g_xx = dxi.kronecker(&dxi);
        let g_xu = dxi.kronecker(&du);
        let j = self.pos.map_or(0, |j| j + 1);
        self.pos = Some(j);
        let w = self.window_steps;
        let l = j % w;
        if l == 0 {
            if j > 0 {
                let wt = self.rule.weight(w, w, self.h);
                self.acc_xx.axpy(wt, &g_xx, 1.0);
                self.acc_xu.axpy(wt, &g_xu, 1.0);
                let dxx = &g_xx - &self.start_outer;
                let reduced =
                    merge_symmetric_columns(&DMatrix::from_row_slice(1, self.q * self.q, dxx.as_slice()), self.q)?;
                self.rows_dxx.push(reduced.row(0).transpose());
                self.rows_xx.push(self.acc_xx.clone());
                self.rows_xu.push(self.acc_xu.clone());
                self.windows.push((t - w as f64 * self.h, t));
            }
            self.start_outer = g_xx.clone();
            self.acc_xx.fill(0.0);
            self.acc_xu.fill(0.0);
        }
        let wt = self.rule.weight(l, w, self.h);
        self.acc_xx.axpy(wt, &g_xx, 1.0);
        self.acc_xu.axpy(wt, &g_xu, 1.0);
        Ok(())
    }

    pub fn batch(&self) -> DataBatch {
        let p = self.windows.len();
        let stack = |rows: &[DVector<f64>], cols: usize| {
            let mut m = DMatrix::zeros(p, cols);
            for (i, r) in rows.iter().enumerate() {
                m.set_row(i, &r.transpose());
            }
            m
        };
        DataBatch {
            q: self.q,
            m: self.m,
            delta_xx: stack(&self.rows_dxx, svec_len(self.q)),
            ixx: stack(&self.rows_xx, self.q * self.q),
            ixu: stack(&self.rows_xu, self.q * self.m),
            windows: self.windows.clone(),
        }
    }
}

/// Builds `p_target` windows of length `delta_tau` starting at
/// `window_start` from a logged segment ending at `segment_end`.
pub fn collect_batch(
    log: &TrajectoryLog,
    window_start: f64,
    segment_end: f64,
    tau: f64,
    delta_tau: f64,
    p_target: usize,
    rule: Quadrature,
) -> Result<DataBatch> {
    let h = log
        .step()
        .ok_or_else(|| Error::InsufficientHistory("trajectory has fewer than two samples".into()))?;
    let end = window_start + p_target as f64 * delta_tau;
    if end > segment_end + 0.5 * h {
        return Err(Error::WindowOverrun {
            start: window_start,
            end,
            segment_end,
        });
    }
    let first = log
        .index_at(window_start - tau)
        .filter(|&i| (log.t[i] - (window_start - tau)).abs() < 0.5 * h)
        .ok_or_else(|| {
            Error::InsufficientHistory(format!(
                "no sample tau = {tau} before the first window at t = {window_start}"
            ))
        })?;
    let last = log
        .index_at(end)
        .filter(|&i| (log.t[i] - end).abs() < 0.5 * h)
        .ok_or_else(|| Error::WindowOverrun {
            start: window_start,
            end,
            segment_end: *log.t.last().unwrap_or(&0.0),
        })?;
    let q = log.xi[first].len();
    let m = log.u[first].len();
    let mut b = BatchBuilder::new(q, m, tau, delta_tau, h, window_start, rule)?;
    for k in first..=last {
        b.push(log.t[k], &log.xi[k], &log.u[k])?;
    }
    Ok(b.batch())
}
