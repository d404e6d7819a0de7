//! Dense linear-algebra primitives and the model-based synthesis oracle.
//!
//! Everything here is a pure function of its inputs. The dimensions in scope
//! are tiny (augmented states of order 4-10), so the Lyapunov solver works on
//! the explicit Kronecker-form linear system in half-vectorized coordinates.

use std::ops::Deref;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue real parts must lie below `-HURWITZ_MARGIN`.
pub const HURWITZ_MARGIN: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-12;

/// Row-major nested-array form used for all matrix serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rows(pub Vec<Vec<f64>>);

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::DimensionMismatch("matrix has no entries".into()));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "row {} has {} entries, expected {ncols}",
            bad + 1,
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// `#[serde(with = "matrix_rows")]` for plain `DMatrix<f64>` fields.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::rows_to_matrix(&rows).map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "vector")]` for plain `DVector<f64>` fields.
pub mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Real symmetric square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Rows", into = "Rows")]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Validates squareness and symmetry (relative tolerance 1e-12), then
    /// stores the exactly symmetrized matrix.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let asym = (&m - m.transpose()).norm();
        if asym > SYMMETRY_TOL * m.norm().max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "matrix is not symmetric (|M - M^T|_F = {asym:.3e})"
            )));
        }
        Ok(Self::symmetrize(m))
    }

    /// Forces symmetry by averaging with the transpose. Used for computed
    /// results whose asymmetry is pure roundoff.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        let s = (&m + m.transpose()) * 0.5;
        SymMatrix(s)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.0.clone().symmetric_eigenvalues()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.min_eigenvalue() > 0.0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl TryFrom<Rows> for SymMatrix {
    type Error = Error;
    fn try_from(rows: Rows) -> Result<Self> {
        SymMatrix::new(rows_to_matrix(&rows.0)?)
    }
}

impl From<SymMatrix> for Rows {
    fn from(s: SymMatrix) -> Self {
        Rows(matrix_to_rows(&s.0))
    }
}

impl TryFrom<DMatrix<f64>> for SymMatrix {
    type Error = Error;
    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        SymMatrix::new(m)
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

/// State-feedback gain `u = -K xi`, an m×q matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Rows", into = "Rows")]
pub struct GainMatrix(DMatrix<f64>);

impl GainMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("gain matrix has non-finite entries".into()));
        }
        Ok(GainMatrix(m))
    }

    pub fn zeros(m: usize, q: usize) -> Self {
        GainMatrix(DMatrix::zeros(m, q))
    }

    pub fn inputs(&self) -> usize {
        self.0.nrows()
    }

    pub fn states(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Relative Frobenius distance `|self - other|_F / |other|_F`.
    pub fn relative_error(&self, reference: &GainMatrix) -> f64 {
        let denom = reference.0.norm();
        let diff = (&self.0 - &reference.0).norm();
        if denom == 0.0 {
            diff
        } else {
            diff / denom
        }
    }
}

impl Deref for GainMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl TryFrom<Rows> for GainMatrix {
    type Error = Error;
    fn try_from(rows: Rows) -> Result<Self> {
        GainMatrix::new(rows_to_matrix(&rows.0)?)
    }
}

impl From<GainMatrix> for Rows {
    fn from(g: GainMatrix) -> Self {
        Rows(matrix_to_rows(&g.0))
    }
}

impl TryFrom<DMatrix<f64>> for GainMatrix {
    type Error = Error;
    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        GainMatrix::new(m)
    }
}

impl From<GainMatrix> for DMatrix<f64> {
    fn from(g: GainMatrix) -> Self {
        g.0
    }
}

/// Logarithmic-norm stability margin of a closed-loop matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityMargin {
    pub mu2: f64,
    /// `-mu2` when `mu2 < 0`, else zero.
    pub gamma: f64,
}

impl StabilityMargin {
    pub fn of(m: &DMatrix<f64>) -> Self {
        let mu2 = log_norm_2(m);
        StabilityMargin {
            mu2,
            gamma: if mu2 < 0.0 { -mu2 } else { 0.0 },
        }
    }
}

fn require_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    m.complex_eigenvalues().iter().copied().collect()
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    m.is_square() && spectral_abscissa(m) < -HURWITZ_MARGIN
}

/// `mu_2(M) = lambda_max((M + M^T)/2)`.
pub fn log_norm_2(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().max()
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Column-stacking vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "cannot reshape length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Number of free entries of a q×q symmetric matrix.
pub fn svec_len(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Upper-triangular entries, row-major over the upper triangle.
pub fn svec(p: &DMatrix<f64>) -> DVector<f64> {
    let q = p.nrows();
    let mut out = Vec::with_capacity(svec_len(q));
    for i in 0..q {
        for j in i..q {
            out.push(p[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

/// Inverse of [`svec`].
pub fn unsvec(v: &DVector<f64>, q: usize) -> Result<SymMatrix> {
    if v.len() != svec_len(q) {
        return Err(Error::DimensionMismatch(format!(
            "svec of a {q}x{q} matrix has {} entries, got {}",
            svec_len(q),
            v.len()
        )));
    }
    let mut p = DMatrix::zeros(q, q);
    let mut idx = 0;
    for i in 0..q {
        for j in i..q {
            p[(i, j)] = v[idx];
            p[(j, i)] = v[idx];
            idx += 1;
        }
    }
    Ok(SymMatrix(p))
}

/// Merges the duplicated Kronecker columns of a `p × q²` matrix whose rows
/// multiply `vec(P)` for a symmetric `P`, producing `p × q(q+1)/2` columns
/// that multiply `svec(P)`.
pub fn merge_symmetric_columns(m: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    if m.ncols() != q * q {
        return Err(Error::DimensionMismatch(format!(
            "expected {} columns for q = {q}, got {}",
            q * q,
            m.ncols()
        )));
    }
    let mut out = DMatrix::zeros(m.nrows(), svec_len(q));
    let mut idx = 0;
    for i in 0..q {
        for j in i..q {
            // vec index of entry (i, j) is j*q + i
            let mut col = m.column(j * q + i).clone_owned();
            if i != j {
                col += m.column(i * q + j);
            }
            out.set_column(idx, &col);
            idx += 1;
        }
    }
    Ok(out)
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Solves `Acl^T P + P Acl + Q = 0` for symmetric `P`.
pub fn solve_lyapunov(acl: &DMatrix<f64>, q: &SymMatrix) -> Result<SymMatrix> {
    let n = require_square(acl, "closed-loop matrix")?;
    if q.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "Q is {}x{} but Acl is {n}x{n}",
            q.dim(),
            q.dim()
        )));
    }
    let abscissa = spectral_abscissa(acl);
    if abscissa >= -HURWITZ_MARGIN {
        return Err(Error::NotHurwitz { abscissa });
    }

    // Column for basis element E_ij is svec(Acl^T E_ij + E_ij Acl).
    let dim = svec_len(n);
    let at = acl.transpose();
    let mut lhs = DMatrix::zeros(dim, dim);
    let mut col = 0;
    for i in 0..n {
        for j in i..n {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            let image = &at * &e + &e * acl;
            lhs.set_column(col, &svec(&image));
            col += 1;
        }
    }
    let rhs = -svec(q);
    let lu = lhs.clone().lu();
    let singular = || Error::SingularSystem("Lyapunov operator is singular".into());
    let mut sol = lu.solve(&rhs).ok_or_else(singular)?;
    // One refinement step recovers most of the accuracy lost to the
    // conditioning of the Kronecker system.
    let correction = lu.solve(&(&rhs - &lhs * &sol)).ok_or_else(singular)?;
    sol += correction;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(
            "Lyapunov solve produced non-finite entries".into(),
        ));
    }
    unsvec(&sol, n)
}

/// Frobenius norm of `A^T P + P A + Q - P B R^{-1} B^T P`.
pub fn are_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &SymMatrix, r: &SymMatrix, p: &DMatrix<f64>) -> Result<f64> {
    let r_inv = invert_spd(r)?;
    let res = a.transpose() * p + p * a + q.as_matrix() - p * b * r_inv * b.transpose() * p;
    Ok(res.norm())
}

fn invert_spd(r: &SymMatrix) -> Result<DMatrix<f64>> {
    r.as_matrix()
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::InvalidParameter("weight matrix is not positive definite".into()))
}

/// One Kleinman step: `P^k` evaluates `K^k`, `K^{k+1} = R^{-1} B^T P^k`.
#[derive(Debug, Clone)]
pub struct KleinmanStep {
    pub k: usize,
    pub gain: GainMatrix,
    pub p: SymMatrix,
    pub next_gain: GainMatrix,
    /// `|P^k - P^{k-1}|_F`; infinite for the first step.
    pub delta: f64,
    pub are_residual: f64,
}

#[derive(Debug, Clone)]
pub struct KleinmanSolution {
    pub p: SymMatrix,
    pub k: GainMatrix,
    pub trace: Vec<KleinmanStep>,
}

fn check_weights(n: usize, m: usize, q: &SymMatrix, r: &SymMatrix) -> Result<()> {
    if q.dim() != n || r.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "weights are {}x{} and {}x{}, expected {n}x{n} and {m}x{m}",
            q.dim(),
            q.dim(),
            r.dim(),
            r.dim()
        )));
    }
    Ok(())
}

/// Kleinman policy iteration for the continuous-time ARE.
///
/// Stops once the ARE residual of the current `P^k` drops below `tol`.
pub fn kleinman_iterate(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &SymMatrix,
    r: &SymMatrix,
    k0: &GainMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<KleinmanSolution> {
    let n = require_square(a, "A")?;
    if b.nrows() != n || k0.nrows() != b.ncols() || k0.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "A {n}x{n}, B {}x{}, K0 {}x{}",
            b.nrows(),
            b.ncols(),
            k0.nrows(),
            k0.ncols()
        )));
    }
    check_weights(n, b.ncols(), q, r)?;
    let r_inv = invert_spd(r)?;
    let r_inv_bt = &r_inv * b.transpose();

    let acl0 = a - b * k0.as_matrix();
    let abscissa = spectral_abscissa(&acl0);
    if abscissa >= -HURWITZ_MARGIN {
        return Err(Error::NotStabilizing { abscissa });
    }

    let mut gain = k0.clone();
    let mut prev: Option<SymMatrix> = None;
    let mut trace = Vec::new();
    let mut residuals = Vec::new();
    for k in 0..max_iter {
        let acl = a - b * gain.as_matrix();
        let qk = SymMatrix::symmetrize(q.as_matrix() + gain.transpose() * r.as_matrix() * gain.as_matrix());
        let p = solve_lyapunov(&acl, &qk)?;
        let next = GainMatrix::new(&r_inv_bt * p.as_matrix())?;
        let delta = prev
            .as_ref()
            .map_or(f64::INFINITY, |pp| (p.as_matrix() - pp.as_matrix()).norm());
        let residual = are_residual(a, b, q, r, &p)?;
        residuals.push(residual);
        trace.push(KleinmanStep {
            k,
            gain: gain.clone(),
            p: p.clone(),
            next_gain: next.clone(),
            delta,
            are_residual: residual,
        });
        if residual < tol {
            return Ok(KleinmanSolution { p, k: next, trace });
        }
        prev = Some(p);
        gain = next;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        trace: residuals,
    })
}

/// CARE solution via the matrix sign function of the Hamiltonian.
///
/// This path shares nothing with [`kleinman_iterate`] beyond basic matrix
/// arithmetic and is used to cross-check it.
pub fn care_sign_function(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &SymMatrix, r: &SymMatrix) -> Result<SymMatrix> {
    let n = require_square(a, "A")?;
    if b.nrows() != n {
        return Err(Error::DimensionMismatch("B rows must match A".into()));
    }
    check_weights(n, b.ncols(), q, r)?;
    let g = b * invert_spd(r)? * b.transpose();

    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q.as_matrix()));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut z = h;
    let mut converged = false;
    for _ in 0..100 {
        let det = z.determinant().abs();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::SingularSystem(
                "Hamiltonian has eigenvalues on the imaginary axis".into(),
            ));
        }
        let c = det.powf(-1.0 / (2.0 * n as f64));
        let zc = &z * c;
        let zi = zc
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularSystem("sign iteration hit a singular iterate".into()))?;
        let next = (zc + zi) * 0.5;
        let change = (&next - &z).norm();
        let scale = z.norm();
        z = next;
        if change <= 1e-13 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations: 100,
            residual: f64::NAN,
            trace: Vec::new(),
        });
    }

    let eye = DMatrix::<f64>::identity(n, n);
    let w11 = z.view((0, 0), (n, n)).clone_owned();
    let w12 = z.view((0, n), (n, n)).clone_owned();
    let w21 = z.view((n, 0), (n, n)).clone_owned();
    let w22 = z.view((n, n), (n, n)).clone_owned();
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::SingularSystem(e.to_string()))?;
    Ok(SymMatrix::symmetrize(p))
}

/// Stabilizing gain by Bass's method: `K = B^T W^{-1}` where
/// `(A + beta I) W + W (A + beta I)^T = 2 B B^T`.
///
/// Returns zero when `A` is already Hurwitz. Requires `(A, B)` controllable.
pub fn stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<GainMatrix> {
    let n = require_square(a, "A")?;
    if b.nrows() != n {
        return Err(Error::DimensionMismatch("B rows must match A".into()));
    }
    if is_hurwitz(a) {
        return Ok(GainMatrix::zeros(b.ncols(), n));
    }
    let min_re = eigenvalues(a).iter().map(|l| l.re).fold(f64::INFINITY, f64::min);
    let beta = 1.0 + (-min_re).max(0.0);
    let shifted = a + DMatrix::identity(n, n) * beta;
    let rhs = SymMatrix::symmetrize(b * b.transpose() * 2.0);
    let w = solve_lyapunov(&(-shifted.transpose()), &rhs)?;
    let w_inv =
        w.as_matrix().clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
            Error::NotStabilizable("controllability Gramian is singular; (A, B) not controllable".into())
        })?;
    GainMatrix::new(b.transpose() * w_inv)
}

/// PBH test: `rank [A - lambda I, B] = n` for every eigenvalue with
/// nonnegative real part.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n {
        return false;
    }
    let scale = a.norm().max(b.norm()).max(1.0);
    for lambda in eigenvalues(a) {
        if lambda.re < -HURWITZ_MARGIN {
            continue;
        }
        let mut pbh = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                pbh[(i, j)] = Complex::new(a[(i, j)], 0.0);
            }
            pbh[(i, i)] -= lambda;
            for j in 0..b.ncols() {
                pbh[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = pbh.singular_values();
        let rank = sv.iter().filter(|s| **s > 1e-10 * scale).count();
        if rank < n {
            return false;
        }
    }
    true
}

/// Oracle LQR: Kleinman iteration seeded with Bass's stabilizing gain.
pub fn lqr_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &SymMatrix, r: &SymMatrix) -> Result<KleinmanSolution> {
    if !is_stabilizable(a, b) {
        return Err(Error::NotStabilizable("(A, B) fails the PBH test".into()));
    }
    let k0 = stabilizing_gain(a, b)?;
    kleinman_iterate(a, b, q, r, &k0, 1e-9, 100)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn lyapunov_negative_identity() {
        let p = solve_lyapunov(&(-DMatrix::identity(2, 2)), &SymMatrix::identity(2)).unwrap();
        assert!((p.as_matrix() - DMatrix::identity(2, 2) * 0.5).norm() < 1e-14);
    }

    #[test]
    fn lyapunov_decoupled() {
        let acl = m(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let p = solve_lyapunov(&acl, &SymMatrix::identity(2)).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((p[(1, 1)] - 0.25).abs() < 1e-14);
        assert!(p[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let acl = m(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(matches!(
            solve_lyapunov(&acl, &SymMatrix::identity(2)),
            Err(Error::NotHurwitz { .. })
        ));
    }

    #[test]
    fn lyapunov_dimension_mismatch() {
        let acl = -DMatrix::<f64>::identity(3, 3);
        assert!(matches!(
            solve_lyapunov(&acl, &SymMatrix::identity(2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn kleinman_scalar_integrator() {
        // a=0, b=1, q=r=1: p = (a r + sqrt(a^2 r^2 + b^2 q r)) / b^2 = 1
        let sol = kleinman_iterate(
            &m(1, 1, &[0.0]),
            &m(1, 1, &[1.0]),
            &SymMatrix::identity(1),
            &SymMatrix::identity(1),
            &GainMatrix::new(m(1, 1, &[1.0])).unwrap(),
            1e-12,
            50,
        )
        .unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((sol.k[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kleinman_decoupled_stable() {
        // per axis: a=-1, b=q=r=1 -> p = -1 + sqrt(2)
        let expected = 2f64.sqrt() - 1.0;
        let sol = kleinman_iterate(
            &(-DMatrix::identity(2, 2)),
            &DMatrix::identity(2, 2),
            &SymMatrix::identity(2),
            &SymMatrix::identity(2),
            &GainMatrix::zeros(2, 2),
            1e-12,
            50,
        )
        .unwrap();
        let target = DMatrix::identity(2, 2) * expected;
        assert!((sol.p.as_matrix() - &target).norm() < 1e-10);
        assert!((sol.k.as_matrix() - &target).norm() < 1e-10);
        for pair in sol.trace.windows(2) {
            let diff = SymMatrix::symmetrize(pair[0].p.as_matrix() - pair[1].p.as_matrix());
            assert!(diff.min_eigenvalue() >= -1e-10);
        }
    }

    #[test]
    fn kleinman_rejects_destabilizing_start() {
        let err = kleinman_iterate(
            &m(1, 1, &[1.0]),
            &m(1, 1, &[1.0]),
            &SymMatrix::identity(1),
            &SymMatrix::identity(1),
            &GainMatrix::zeros(1, 1),
            1e-10,
            10,
        );
        assert!(matches!(err, Err(Error::NotStabilizing { .. })));
    }

    #[test]
    fn kleinman_reports_no_convergence() {
        let err = kleinman_iterate(
            &m(1, 1, &[1.0]),
            &m(1, 1, &[1.0]),
            &SymMatrix::identity(1),
            &SymMatrix::identity(1),
            &GainMatrix::new(m(1, 1, &[50.0])).unwrap(),
            1e-15,
            2,
        );
        match err {
            Err(Error::NoConvergence { iterations, trace, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(trace.len(), 2);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn sign_function_matches_scalar_closed_form() {
        let p = care_sign_function(
            &m(1, 1, &[0.0]),
            &m(1, 1, &[1.0]),
            &SymMatrix::identity(1),
            &SymMatrix::identity(1),
        )
        .unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_norm_examples() {
        assert!((log_norm_2(&(-DMatrix::identity(3, 3))) + 1.0).abs() < 1e-14);
        assert!(log_norm_2(&m(2, 2, &[0.0, 1.0, -1.0, 0.0])).abs() < 1e-14);
        assert!(log_norm_2(&m(2, 2, &[-1.0, 2.0, 0.0, -1.0])).abs() < 1e-14);
    }

    #[test]
    fn stability_margin_clamps_gamma() {
        let s = StabilityMargin::of(&(-DMatrix::identity(2, 2) * 3.0));
        assert!((s.gamma - 3.0).abs() < 1e-14);
        let s = StabilityMargin::of(&m(2, 2, &[-1.0, 4.0, 0.0, -1.0]));
        assert!(s.mu2 > 0.0);
        assert_eq!(s.gamma, 0.0);
    }

    #[test]
    fn vectorization_examples() {
        let x = m(2, 2, &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(vec(&x).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(svec(&DMatrix::identity(2, 2)).as_slice(), &[1.0, 0.0, 1.0]);
        let y = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let eye = DMatrix::identity(2, 2);
        assert_eq!(kron(&eye.transpose(), &eye) * vec(&y), vec(&y));
    }

    #[test]
    fn kronecker_vec_identity() {
        let x = m(2, 3, &[1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let y = m(3, 2, &[2.0, 1.0, 0.0, -1.0, 4.0, 0.25]);
        let z = m(2, 2, &[0.5, 2.0, -3.0, 1.0]);
        let lhs = vec(&(&x * &y * &z));
        let rhs = kron(&z.transpose(), &x) * vec(&y);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn vec_reshape_mismatch() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(unvec(&v, 2, 2), Err(Error::DimensionMismatch(_))));
        assert!(matches!(unsvec(&v, 3), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn merged_columns_act_on_svec() {
        let p = m(3, 3, &[2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.0]);
        let rows = m(
            2,
            9,
            &[
                1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, -1.0, 0.0, 2.0, 1.0, 3.0, 0.5, 0.0, 1.0, 2.0,
            ],
        );
        let full = &rows * vec(&p);
        let merged = merge_symmetric_columns(&rows, 3).unwrap() * svec(&p);
        assert!((full - merged).norm() < 1e-12);
    }

    #[test]
    fn symmetric_matrix_validation() {
        assert!(SymMatrix::new(m(2, 2, &[1.0, 2.0, 2.1, 1.0])).is_err());
        assert!(SymMatrix::new(m(2, 3, &[0.0; 6])).is_err());
        assert!(SymMatrix::new(m(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_ok());
        assert!(GainMatrix::new(m(1, 2, &[f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn bass_gain_stabilizes_double_integrator() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let k = stabilizing_gain(&a, &b).unwrap();
        assert!(is_hurwitz(&(&a - &b * k.as_matrix())));
    }

    #[test]
    fn pbh_detects_unstabilizable_pair() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        assert!(!is_stabilizable(&a, &b));
        let b2 = m(2, 1, &[1.0, 0.0]);
        assert!(is_stabilizable(&a, &b2));
    }
}
