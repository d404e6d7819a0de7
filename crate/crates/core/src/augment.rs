//! PI augmentation and delayed incremental variables.
//!
//! Appending `z' = C x - x_d` to the state lets a static gain on
//! `xi = [x; z]` regulate the known output to `x_d` without knowing the
//! mode's equilibrium. Differencing `xi` against its value `tau` seconds
//! earlier removes the unknown constant `d_bar` from the data.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{ModeLabel, PlantMode};
use crate::linalg::{is_hurwitz, spectral_abscissa, GainMatrix};

/// Known part of the reference: `C x^r = x_d_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputReference {
    pub c: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub x_d_ref: DVector<f64>,
}

impl OutputReference {
    /// `E = 0`: the integral state enters only through the feedback.
    pub fn new(c: DMatrix<f64>, x_d_ref: DVector<f64>) -> Result<Self> {
        let e = DMatrix::zeros(c.ncols(), c.nrows());
        Self::with_injection(c, e, x_d_ref)
    }

    pub fn with_injection(c: DMatrix<f64>, e: DMatrix<f64>, x_d_ref: DVector<f64>) -> Result<Self> {
        let (s, n) = c.shape();
        if s == 0 || n == 0 {
            return Err(Error::DimensionMismatch("C must have at least one row".into()));
        }
        if e.shape() != (n, s) || x_d_ref.len() != s {
            return Err(Error::DimensionMismatch(format!(
                "C is {s}x{n}; E must be {n}x{s} (got {}x{}) and x_d_ref length {s} (got {})",
                e.nrows(),
                e.ncols(),
                x_d_ref.len()
            )));
        }
        let rank = c.clone().svd(false, false).rank(1e-10 * c.amax().max(1.0));
        if rank < s {
            return Err(Error::InvalidParameter(format!(
                "C must have full row rank {s}, got {rank}"
            )));
        }
        Ok(OutputReference { c, e, x_d_ref })
    }

    pub fn s(&self) -> usize {
        self.c.nrows()
    }
}

/// `(A_aug, B_aug, d_bar)` of dimension `q = n + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedMode {
    pub mode_id: u32,
    pub label: ModeLabel,
    pub a_aug: DMatrix<f64>,
    pub b_aug: DMatrix<f64>,
    pub d_bar: DVector<f64>,
    n: usize,
}

impl AugmentedMode {
    /// Accepts augmented matrices given verbatim, checking that the last `s`
    /// rows carry no input and no integral self-coupling.
    pub fn from_parts(
        mode_id: u32,
        label: ModeLabel,
        a_aug: DMatrix<f64>,
        b_aug: DMatrix<f64>,
        d_bar: DVector<f64>,
        s: usize,
    ) -> Result<Self> {
        let q = a_aug.nrows();
        if !a_aug.is_square() || b_aug.nrows() != q || d_bar.len() != q || s == 0 || s >= q {
            return Err(Error::DimensionMismatch(format!(
                "augmented mode {mode_id}: A {}x{}, B {}x{}, d {}, s = {s}",
                a_aug.nrows(),
                a_aug.ncols(),
                b_aug.nrows(),
                b_aug.ncols(),
                d_bar.len()
            )));
        }
        let n = q - s;
        let zz = a_aug.view((n, n), (s, s)).amax();
        let bz = b_aug.rows(n, s).amax();
        if zz != 0.0 || bz != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "augmented mode {mode_id}: integral block must be [C, 0] with zero input rows"
            )));
        }
        Ok(AugmentedMode {
            mode_id,
            label,
            a_aug,
            b_aug,
            d_bar,
            n,
        })
    }

    pub fn q(&self) -> usize {
        self.a_aug.nrows()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.q() - self.n
    }

    pub fn m(&self) -> usize {
        self.b_aug.ncols()
    }

    pub fn closed_loop(&self, k: &GainMatrix) -> DMatrix<f64> {
        &self.a_aug - &self.b_aug * k.as_matrix()
    }
}

/// `A_aug = [[A, E], [C, 0]]`, `B_aug = [B1; 0]`, `d_bar = [d; -x_d]`.
pub fn augment(mode: &PlantMode, r: &OutputReference) -> Result<AugmentedMode> {
    let (n, m, s) = (mode.n(), mode.m(), r.s());
    if r.c.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "mode {} has n = {n} but C has {} columns",
            mode.mode_id,
            r.c.ncols()
        )));
    }
    let q = n + s;
    let mut a = DMatrix::zeros(q, q);
    a.view_mut((0, 0), (n, n)).copy_from(&mode.a_sigma);
    a.view_mut((0, n), (n, s)).copy_from(&r.e);
    a.view_mut((n, 0), (s, n)).copy_from(&r.c);
    let mut b = DMatrix::zeros(q, m);
    b.view_mut((0, 0), (n, m)).copy_from(&mode.b1);
    let mut d = DVector::zeros(q);
    d.rows_mut(0, n).copy_from(&mode.d_sigma);
    d.rows_mut(n, s).copy_from(&(-&r.x_d_ref));
    Ok(AugmentedMode {
        mode_id: mode.mode_id,
        label: mode.label,
        a_aug: a,
        b_aug: b,
        d_bar: d,
        n,
    })
}

/// `xi^r = -(A_aug - B_aug K)^{-1} d_bar`.
pub fn equilibrium(aug: &AugmentedMode, k: &GainMatrix) -> Result<DVector<f64>> {
    if k.shape() != (aug.m(), aug.q()) {
        return Err(Error::DimensionMismatch(format!(
            "gain is {}x{}, expected {}x{}",
            k.nrows(),
            k.ncols(),
            aug.m(),
            aug.q()
        )));
    }
    let acl = aug.closed_loop(k);
    if !is_hurwitz(&acl) {
        return Err(Error::NotHurwitz {
            abscissa: spectral_abscissa(&acl),
        });
    }
    let lu = acl.clone().lu();
    let xr = lu.solve(&(-&aug.d_bar)).ok_or(Error::SingularClosedLoop)?;
    if (&acl * &xr + &aug.d_bar).norm() > 1e-10 * (1.0 + aug.d_bar.norm()) {
        return Err(Error::SingularClosedLoop);
    }
    Ok(xr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub xi: DVector<f64>,
    pub u: DVector<f64>,
}

/// Bounded history of uniformly spaced samples answering
/// `(xi(t) - xi(t - tau), u(t) - u(t - tau))`.
#[derive(Debug, Clone)]
pub struct DelayBuffer {
    samples: VecDeque<Sample>,
    step: f64,
    lag: usize,
    capacity: usize,
}

impl DelayBuffer {
    /// `extra` is the number of samples kept beyond the delay itself.
    pub fn new(tau: f64, step: f64, extra: usize) -> Result<Self> {
        let lag = delay_steps(tau, step)?;
        Ok(DelayBuffer {
            samples: VecDeque::with_capacity(lag + extra + 1),
            step,
            lag,
            capacity: lag + extra + 1,
        })
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn tau(&self) -> f64 {
        self.lag as f64 * self.step
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, t: f64, xi: DVector<f64>, u: DVector<f64>) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(Sample { t, xi, u });
    }

    fn index_of(&self, t: f64) -> Option<usize> {
        let first = self.samples.front()?.t;
        let k = ((t - first) / self.step).round();
        if k < 0.0 || (first + k * self.step - t).abs() > 1e-6 * self.step {
            return None;
        }
        let k = k as usize;
        (k < self.samples.len()).then_some(k)
    }

    pub fn incremental(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let now = self
            .index_of(t)
            .ok_or_else(|| Error::InsufficientHistory(format!("no sample at t = {t}")))?;
        if now < self.lag {
            return Err(Error::InsufficientHistory(format!(
                "t = {t} is less than tau = {} after the oldest retained sample",
                self.tau()
            )));
        }
        let (a, b) = (&self.samples[now], &self.samples[now - self.lag]);
        Ok((&a.xi - &b.xi, &a.u - &b.u))
    }
}

/// `tau / step` as an exact integer number of steps.
pub fn delay_steps(tau: f64, step: f64) -> Result<usize> {
    if !(step > 0.0 && tau > 0.0 && step.is_finite() && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "tau = {tau} and step = {step} must be positive"
        )));
    }
    let k = (tau / step).round();
    if (k * step - tau).abs() > 1e-9 * tau {
        return Err(Error::InvalidParameter(format!(
            "tau = {tau} is not an integer multiple of step = {step}"
        )));
    }
    Ok(k as usize)
}
