//! Matrix and operator primitives: symmetric eigendecompositions, matrix
//! square roots, q-Schatten norms, discretized `L^q` norms, empirical
//! covariance operators, and the Procrustes covariance interpolation path.
//!
//! Curves and operators are represented on fixed finite grids; the matrix of
//! kernel values stands in for the operator. Every eigendecomposition or SVD
//! goes through this module and bumps a process-wide counter, which is what
//! the benchmark harness reads to compare the analytic pipeline against the
//! cost structure of simulation-based testing. The Hilbert–Schmidt (q = 2)
//! norm is evaluated through the Frobenius identity and therefore costs no
//! decomposition.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated by [`SymOperator`].
const SYM_TOL: f64 = 1e-10;
/// Eigenvalues above `-PSD_TOL * lambda_max` are clamped to zero; anything
/// below is genuine indefiniteness and a hard error.
const PSD_TOL: f64 = 1e-8;
/// Singular values below `1e-12 * nu_max` count as numerically zero.
const RANK_TOL: f64 = 1e-12;

static DECOMPOSITIONS: AtomicU64 = AtomicU64::new(0);

/// Number of eigendecompositions/SVDs performed since the last reset.
pub fn decomposition_count() -> u64 {
    DECOMPOSITIONS.load(Ordering::Relaxed)
}

pub fn reset_decomposition_count() {
    DECOMPOSITIONS.store(0, Ordering::Relaxed);
}

fn count_decomposition() {
    DECOMPOSITIONS.fetch_add(1, Ordering::Relaxed);
}

/// Which norm drives a statistic: `l^q` on coordinates, `L^q` on curves, or
/// the q-Schatten norm on operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NormSpace {
    Sequence,
    Function,
    Schatten,
}

/// Norm exponent; infinity is a distinguished value, never a large float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Q {
    Finite(f64),
    Inf,
}

impl Q {
    pub fn finite(q: f64) -> Result<Self> {
        if !q.is_finite() || q < 1.0 {
            return Err(Error::domain(format!(
                "norm exponent must satisfy q >= 1, got {q}"
            )));
        }
        Ok(Q::Finite(q))
    }
}

impl Serialize for Q {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Q::Finite(q) => s.serialize_f64(*q),
            Q::Inf => s.serialize_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormSpec {
    pub space: NormSpace,
    pub q: Q,
}

impl NormSpec {
    pub fn new(space: NormSpace, q: Q) -> Self {
        NormSpec { space, q }
    }

    pub fn sequence(q: Q) -> Self {
        Self::new(NormSpace::Sequence, q)
    }

    pub fn function(q: Q) -> Self {
        Self::new(NormSpace::Function, q)
    }

    pub fn schatten(q: Q) -> Self {
        Self::new(NormSpace::Schatten, q)
    }
}

impl fmt::Display for NormSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.space {
            NormSpace::Sequence => "l",
            NormSpace::Function => "L",
            NormSpace::Schatten => "s",
        };
        match self.q {
            Q::Finite(q) => write!(f, "{prefix}{q}"),
            Q::Inf => write!(f, "{prefix}inf"),
        }
    }
}

/// Symmetric real matrix; the finite-grid stand-in for a self-adjoint
/// operator. Validated (square, symmetric to `1e-10` relative, finite) and
/// stored exactly symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct SymOperator {
    mat: DMatrix<f64>,
}

impl SymOperator {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() || mat.nrows() == 0 {
            return Err(Error::domain(format!(
                "operator must be square and non-empty, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("operator entries must be finite"));
        }
        let asym = (&mat - mat.transpose()).norm();
        if asym > SYM_TOL * mat.norm().max(1.0) {
            return Err(Error::domain(format!(
                "matrix is not symmetric (relative asymmetry {:.3e})",
                asym / mat.norm().max(1.0)
            )));
        }
        let sym = (&mat + mat.transpose()) * 0.5;
        Ok(SymOperator { mat: sym })
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub fn identity(dim: usize) -> Self {
        SymOperator {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }
}

/// A curve sampled on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCurve {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl GridCurve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() || grid.is_empty() {
            return Err(Error::domain(format!(
                "grid and values must be non-empty and equal length ({} vs {})",
                grid.len(),
                values.len()
            )));
        }
        if grid.iter().any(|t| !t.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("curve grid and values must be finite"));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("curve grid must be strictly increasing"));
        }
        Ok(GridCurve { grid, values })
    }

    /// Uniform grid on [0, 1] with `len` points.
    pub fn uniform_unit_grid(len: usize) -> Vec<f64> {
        (0..len).map(|i| i as f64 / (len as f64 - 1.0)).collect()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn same_grid(&self, other: &GridCurve) -> bool {
        self.grid.len() == other.grid.len()
            && self
                .grid
                .iter()
                .zip(other.grid.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0))
    }

    /// Trapezoidal quadrature weights for this grid.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let g = &self.grid;
        let n = g.len();
        let mut w = vec![0.0; n];
        if n < 2 {
            return w;
        }
        w[0] = (g[1] - g[0]) / 2.0;
        w[n - 1] = (g[n - 1] - g[n - 2]) / 2.0;
        for i in 1..n - 1 {
            w[i] = (g[i + 1] - g[i - 1]) / 2.0;
        }
        w
    }
}

/// Symmetric eigendecomposition. Eigenvalues descending, eigenvectors as
/// orthonormal columns in matching order.
pub fn sym_eig(a: &SymOperator) -> Result<(DVector<f64>, DMatrix<f64>)> {
    count_decomposition();
    let eig = a.mat.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .ok_or(())
            .map_err(|_| "non-finite eigenvalue")
            .unwrap()
    });
    let d = a.dim();
    let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// Eigenvalues (descending) of a PSD matrix, negatives clamped to zero.
/// Errors if an eigenvalue is more negative than the PSD drift tolerance.
fn psd_eigenvalues(a: &SymOperator, context: &str) -> Result<Vec<f64>> {
    let (vals, _) = sym_eig(a)?;
    let lambda_max = vals[0].max(0.0);
    let mut out = Vec::with_capacity(vals.len());
    for &v in vals.iter() {
        if v < -PSD_TOL * lambda_max.max(f64::MIN_POSITIVE) {
            return Err(Error::domain(format!(
                "{context}: matrix is not positive semi-definite (eigenvalue {v:.6e}, max {lambda_max:.6e})"
            )));
        }
        out.push(v.max(0.0));
    }
    Ok(out)
}

/// Principal square root of a PSD symmetric matrix via `U D^{1/2} U^T`.
///
/// Eigenvalues within the drift tolerance below zero are clamped; anything
/// more negative is rejected as not PSD.
pub fn matrix_sqrt(a: &SymOperator) -> Result<SymOperator> {
    let (vals, vecs) = sym_eig(a)?;
    let lambda_max = vals[0].max(0.0);
    let mut sqrt_d = DVector::zeros(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if v < -PSD_TOL * lambda_max.max(f64::MIN_POSITIVE) {
            return Err(Error::domain(format!(
                "matrix_sqrt: not positive semi-definite (eigenvalue {v:.6e})"
            )));
        }
        sqrt_d[i] = v.max(0.0).sqrt();
    }
    let root = &vecs * DMatrix::from_diagonal(&sqrt_d) * vecs.transpose();
    SymOperator::new((&root + root.transpose()) * 0.5)
}

/// q-Schatten norm of an arbitrary rectangular matrix: the `l^q` norm of its
/// singular values. `q = 2` is the Frobenius norm and needs no
/// decomposition; `q = inf` is the operator norm.
pub fn schatten_norm(a: &DMatrix<f64>, q: Q) -> Result<f64> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("schatten_norm: entries must be finite"));
    }
    if let Q::Finite(qv) = q {
        if (qv - 2.0).abs() < 1e-14 {
            return Ok(a.norm());
        }
    }
    let sv = singular_values(a)?;
    Ok(lq_of_singular_values(&sv, q))
}

/// Singular values of `a`, descending. Symmetric inputs go through the
/// symmetric eigensolver (singular values are |eigenvalues|), everything
/// else through the SVD. Counted either way.
pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let square_symmetric =
        a.nrows() == a.ncols() && (a - a.transpose()).norm() <= SYM_TOL * a.norm().max(1.0);
    let mut sv: Vec<f64> = if square_symmetric {
        count_decomposition();
        let eig = a.clone().symmetric_eigen();
        eig.eigenvalues.iter().map(|v| v.abs()).collect()
    } else {
        count_decomposition();
        let svd = a.clone().svd(false, false);
        svd.singular_values.iter().copied().collect()
    };
    sv.sort_by(|x, y| y.partial_cmp(x).expect("non-finite singular value"));
    Ok(sv)
}

fn lq_of_singular_values(sv: &[f64], q: Q) -> f64 {
    let nu_max = sv.first().copied().unwrap_or(0.0);
    if nu_max == 0.0 {
        return 0.0;
    }
    match q {
        Q::Inf => nu_max,
        Q::Finite(qv) => {
            let cutoff = RANK_TOL * nu_max;
            let sum: f64 = sv
                .iter()
                .filter(|&&v| v >= cutoff)
                .map(|&v| (v / nu_max).powf(qv))
                .sum();
            nu_max * sum.powf(1.0 / qv)
        }
    }
}

/// `|| M^{1/2} ||_{S^q}` for PSD `M`, i.e. the `l^{q}` norm of the square
/// roots of its eigenvalues. For q = 2 this is `sqrt(tr M)` and costs no
/// decomposition.
pub fn psd_sqrt_schatten(m: &SymOperator, q: Q) -> Result<f64> {
    if let Q::Finite(qv) = q {
        if (qv - 2.0).abs() < 1e-14 {
            let tr: f64 = m.matrix().diagonal().iter().sum();
            return Ok(tr.max(0.0).sqrt());
        }
    }
    let lambdas = psd_eigenvalues(m, "psd_sqrt_schatten")?;
    let roots: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
    Ok(lq_of_singular_values(&roots, q))
}

/// `L^q` norm of a curve by trapezoidal quadrature on its own grid; the
/// grid maximum for q = inf.
pub fn lq_curve_norm(c: &GridCurve, q: Q) -> Result<f64> {
    match q {
        Q::Inf => Ok(c.values().iter().fold(0.0f64, |m, v| m.max(v.abs()))),
        Q::Finite(qv) => {
            if c.len() < 2 {
                return Err(Error::domain(
                    "L^q norm needs at least 2 grid points for finite q",
                ));
            }
            let w = c.trapezoid_weights();
            let sum: f64 = c
                .values()
                .iter()
                .zip(w.iter())
                .map(|(v, wi)| wi * v.abs().powf(qv))
                .sum();
            Ok(sum.powf(1.0 / qv))
        }
    }
}

/// `l^q` norm of a coordinate vector.
pub fn lq_vector_norm(v: &[f64], q: Q) -> f64 {
    match q {
        Q::Inf => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        Q::Finite(qv) => v
            .iter()
            .map(|x| x.abs().powf(qv))
            .sum::<f64>()
            .powf(1.0 / qv),
    }
}

/// Empirical covariance `(n-1)^{-1} sum_i x_i x_i^T` of n >= 2 equal-length
/// vectors, optionally centered about the sample mean first.
pub fn empirical_covariance(rows: &[DVector<f64>], center: bool) -> Result<SymOperator> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::domain("empirical_covariance needs n >= 2 items"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::domain("empirical_covariance: mismatched dimensions"));
    }
    let mean = if center {
        let mut m = DVector::zeros(d);
        for r in rows {
            m += r;
        }
        m / n as f64
    } else {
        DVector::zeros(d)
    };
    let mut acc = DMatrix::zeros(d, d);
    for r in rows {
        let centered = r - &mean;
        // rank-one update acc += x x^T
        acc.ger(1.0, &centered, &centered, 1.0);
    }
    acc /= (n - 1) as f64;
    SymOperator::new((&acc + acc.transpose()) * 0.5)
}

/// The matrix-variance scale of a collection of equally shaped matrices:
/// `max{ ||(sum X_i X_i^T)^{1/2}||_{S^q}, ||(sum X_i^T X_i)^{1/2}||_{S^q} }`.
/// When every item is symmetric the two branches coincide and only
/// `(sum X_i^2)^{1/2}` is evaluated.
pub fn noncomm_scale(items: &[DMatrix<f64>], q: Q) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::domain("noncomm_scale needs at least one item"));
    }
    let (r, c) = (items[0].nrows(), items[0].ncols());
    if items.iter().any(|m| m.nrows() != r || m.ncols() != c) {
        return Err(Error::domain("noncomm_scale: mismatched shapes"));
    }
    let all_symmetric = r == c
        && items
            .iter()
            .all(|m| (m - m.transpose()).norm() <= SYM_TOL * m.norm().max(1.0));
    if all_symmetric {
        let mut sum = DMatrix::zeros(r, r);
        for m in items {
            sum.gemm(1.0, m, m, 1.0);
        }
        return psd_sqrt_schatten(&SymOperator::new((&sum + sum.transpose()) * 0.5)?, q);
    }
    let mut left = DMatrix::zeros(r, r);
    let mut right = DMatrix::zeros(c, c);
    for m in items {
        left.gemm_tr(1.0, &m.transpose(), &m.transpose(), 1.0);
        right.gemm_tr(1.0, m, m, 1.0);
    }
    let sl = psd_sqrt_schatten(&SymOperator::new((&left + left.transpose()) * 0.5)?, q)?;
    let sr = psd_sqrt_schatten(&SymOperator::new((&right + right.transpose()) * 0.5)?, q)?;
    Ok(sl.max(sr))
}

/// Optimal alignment between the square roots of two PSD operators.
#[derive(Debug, Clone)]
pub struct ProcrustesAlignment {
    /// `Delta = Sigma_b^{1/2} R - Sigma_a^{1/2}`.
    pub delta: DMatrix<f64>,
    /// The orthogonal alignment `R = U V^T`.
    pub rotation: DMatrix<f64>,
}

/// The direction `Delta` minimizing the Procrustes distance between two PSD
/// operators, with `R = U V^T` from the SVD of `(Sigma_b^{1/2})^T
/// (Sigma_a^{1/2})`.
pub fn procrustes_delta(
    sigma_a: &SymOperator,
    sigma_b: &SymOperator,
) -> Result<ProcrustesAlignment> {
    if sigma_a.dim() != sigma_b.dim() {
        return Err(Error::domain(format!(
            "procrustes_delta: dimension mismatch {} vs {}",
            sigma_a.dim(),
            sigma_b.dim()
        )));
    }
    let root_a = matrix_sqrt(sigma_a)?.into_matrix();
    let root_b = matrix_sqrt(sigma_b)?.into_matrix();
    let cross = root_b.transpose() * &root_a;
    count_decomposition();
    let svd = cross.svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::numeric("SVD did not produce U"))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::numeric("SVD did not produce V^T"))?;
    let rotation = u * v_t;
    let delta = &root_b * &rotation - &root_a;
    Ok(ProcrustesAlignment { delta, rotation })
}

/// Point on the covariance interpolation path:
/// `Sigma(gamma) = [Sigma_a^{1/2} + gamma Delta][Sigma_a^{1/2} + gamma Delta]^T`.
/// `gamma = 0` gives `Sigma_a`, `gamma = 1` gives `Sigma_b`.
pub fn covariance_path(
    sigma_a: &SymOperator,
    sigma_b: &SymOperator,
    gamma: f64,
) -> Result<SymOperator> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::domain(format!(
            "covariance_path requires gamma >= 0, got {gamma}"
        )));
    }
    let align = procrustes_delta(sigma_a, sigma_b)?;
    let root_a = matrix_sqrt(sigma_a)?.into_matrix();
    let g = root_a + align.delta * gamma;
    let prod = &g * g.transpose();
    SymOperator::new((&prod + prod.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_sym_psd(d: usize, rng: &mut ChaCha8Rng) -> SymOperator {
        let b = random_matrix(d, d, rng);
        SymOperator::new(&b * b.transpose()).unwrap()
    }

    #[test]
    fn sym_eig_identity_and_diagonal() {
        let (vals, _) = sym_eig(&SymOperator::identity(3)).unwrap();
        for v in vals.iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
        let (vals, vecs) =
            sym_eig(&SymOperator::from_diagonal(&[5.0, 2.0, -1.0]).unwrap()).unwrap();
        assert_relative_eq!(vals[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(vals[2], -1.0, epsilon = 1e-12);
        // eigenvectors of a diagonal matrix are signed unit columns
        for k in 0..3 {
            let col = vecs.column(k);
            let mut hits = 0;
            for v in col.iter() {
                if v.abs() > 1e-8 {
                    hits += 1;
                    assert_relative_eq!(v.abs(), 1.0, epsilon = 1e-10);
                }
            }
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn sym_eig_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_matrix(10, 10, &mut rng);
        let a = SymOperator::new((&b + b.transpose()) * 0.5).unwrap();
        let (vals, vecs) = sym_eig(&a).unwrap();
        let rebuilt = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        let resid = (a.matrix() - &rebuilt).norm() / a.matrix().norm();
        assert!(resid <= 1e-8, "reconstruction residual {resid}");
        let orth = (vecs.transpose() * &vecs - DMatrix::identity(10, 10)).norm();
        assert!(orth <= 1e-10, "orthogonality residual {orth}");
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(SymOperator::new(m).is_err());
    }

    #[test]
    fn matrix_sqrt_diagonal() {
        let a = SymOperator::from_diagonal(&[4.0, 9.0]).unwrap();
        let r = matrix_sqrt(&a).unwrap();
        assert_relative_eq!(r.matrix()[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(r.matrix()[(1, 1)], 3.0, epsilon = 1e-12);
        let i = SymOperator::identity(4);
        assert_relative_eq!(
            (matrix_sqrt(&i).unwrap().matrix() - i.matrix()).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn matrix_sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_sym_psd(8, &mut rng);
            let r = matrix_sqrt(&a).unwrap();
            let resid = (r.matrix() * r.matrix() - a.matrix()).norm() / a.matrix().norm();
            assert!(resid <= 1e-8, "sqrt residual {resid}");
        }
    }

    #[test]
    fn matrix_sqrt_rejects_indefinite() {
        let a = SymOperator::from_diagonal(&[1.0, -0.5]).unwrap();
        assert!(matrix_sqrt(&a).is_err());
    }

    #[test]
    fn schatten_closed_forms() {
        let i4 = DMatrix::<f64>::identity(4, 4);
        assert_relative_eq!(
            schatten_norm(&i4, Q::Finite(1.0)).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(&[3.0, 4.0]));
        assert_relative_eq!(
            schatten_norm(&d, Q::Finite(2.0)).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(schatten_norm(&d, Q::Inf).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn schatten_monotone_in_inverse_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_matrix(6, 4, &mut rng);
            let s1 = schatten_norm(&m, Q::Finite(1.0)).unwrap();
            let s2 = schatten_norm(&m, Q::Finite(2.0)).unwrap();
            let sinf = schatten_norm(&m, Q::Inf).unwrap();
            assert!(s1 >= s2 - 1e-12 && s2 >= sinf - 1e-12, "{s1} {s2} {sinf}");
        }
    }

    #[test]
    fn schatten_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &q in &[Q::Finite(1.0), Q::Finite(2.0), Q::Finite(3.5), Q::Inf] {
            for _ in 0..20 {
                let a = random_matrix(5, 3, &mut rng);
                let b = random_matrix(5, 3, &mut rng);
                let lhs = schatten_norm(&(&a + &b), q).unwrap();
                let rhs = schatten_norm(&a, q).unwrap() + schatten_norm(&b, q).unwrap();
                assert!(lhs <= rhs + 1e-10, "triangle violated: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn lq_curve_norms() {
        let grid = GridCurve::uniform_unit_grid(101);
        let ones = GridCurve::new(grid.clone(), vec![1.0; 101]).unwrap();
        assert_relative_eq!(
            lq_curve_norm(&ones, Q::Finite(2.0)).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        let grid = GridCurve::uniform_unit_grid(1001);
        let ramp = GridCurve::new(grid.clone(), grid.clone()).unwrap();
        assert_relative_eq!(
            lq_curve_norm(&ramp, Q::Finite(1.0)).unwrap(),
            0.5,
            epsilon = 1e-6
        );
        assert_relative_eq!(lq_curve_norm(&ramp, Q::Inf).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lq_curve_norm_matches_fine_grid() {
        // sin(2 pi t) on [0,1]: compare a 1001-point grid against a 100001-point one.
        let coarse_grid = GridCurve::uniform_unit_grid(1001);
        let coarse = GridCurve::new(
            coarse_grid.clone(),
            coarse_grid
                .iter()
                .map(|t| (2.0 * std::f64::consts::PI * t).sin())
                .collect(),
        )
        .unwrap();
        let fine_grid = GridCurve::uniform_unit_grid(100_001);
        let fine = GridCurve::new(
            fine_grid.clone(),
            fine_grid
                .iter()
                .map(|t| (2.0 * std::f64::consts::PI * t).sin())
                .collect(),
        )
        .unwrap();
        let a = lq_curve_norm(&coarse, Q::Finite(2.0)).unwrap();
        let b = lq_curve_norm(&fine, Q::Finite(2.0)).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-4);
    }

    #[test]
    fn covariance_simple_cases() {
        let v = DVector::from_row_slice(&[1.0, 2.0, -1.0]);
        let cov = empirical_covariance(&[v.clone(), -v.clone()], true).unwrap();
        let expect = { DMatrix::from_fn(3, 3, |i, j| 2.0 * v[i] * v[j]) };
        assert!((cov.matrix() - expect).norm() < 1e-12);

        let same = vec![v.clone(); 5];
        let cov = empirical_covariance(&same, true).unwrap();
        assert!(cov.matrix().norm() < 1e-12);

        assert!(empirical_covariance(&[v], true).is_err());
    }

    #[test]
    fn covariance_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<DVector<f64>> = (0..20)
            .map(|_| DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let cov = empirical_covariance(&rows, true).unwrap();
        // independent double-loop oracle
        let n = rows.len();
        let mut mean = [0.0; 5];
        for r in &rows {
            for (i, m) in mean.iter_mut().enumerate() {
                *m += r[i] / n as f64;
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for r in &rows {
                    s += (r[i] - mean[i]) * (r[j] - mean[j]);
                }
                s /= (n - 1) as f64;
                assert_relative_eq!(cov.matrix()[(i, j)], s, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn covariance_output_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let rows: Vec<DVector<f64>> = (0..8)
                .map(|_| DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let cov = empirical_covariance(&rows, true).unwrap();
            let (vals, _) = sym_eig(&cov).unwrap();
            let lmax = vals[0].max(0.0);
            assert!(vals[vals.len() - 1] >= -1e-8 * lmax.max(1e-300));
        }
    }

    #[test]
    fn noncomm_scale_identity() {
        let items = vec![DMatrix::<f64>::identity(4, 4)];
        let s = noncomm_scale(&items, Q::Finite(2.0)).unwrap();
        assert_relative_eq!(s, 2.0, epsilon = 1e-12); // sqrt(d) = 2
    }

    #[test]
    fn noncomm_scale_symmetric_branches_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let items: Vec<DMatrix<f64>> = (0..5)
            .map(|_| {
                let b = random_matrix(4, 4, &mut rng);
                (&b + b.transpose()) * 0.5
            })
            .collect();
        for &q in &[Q::Finite(1.0), Q::Finite(2.0), Q::Inf] {
            let fused = noncomm_scale(&items, q).unwrap();
            // rebuild both branches explicitly
            let mut left = DMatrix::zeros(4, 4);
            let mut right = DMatrix::zeros(4, 4);
            for m in &items {
                left += m * m.transpose();
                right += m.transpose() * m;
            }
            let sl = psd_sqrt_schatten(&SymOperator::new(left).unwrap(), q).unwrap();
            let sr = psd_sqrt_schatten(&SymOperator::new(right).unwrap(), q).unwrap();
            assert_relative_eq!(sl, sr, epsilon = 1e-10);
            assert_relative_eq!(fused, sl.max(sr), epsilon = 1e-10);
        }
    }

    #[test]
    fn noncomm_scale_rectangular_matches_primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let items: Vec<DMatrix<f64>> = (0..5).map(|_| random_matrix(4, 3, &mut rng)).collect();
        let s = noncomm_scale(&items, Q::Finite(1.0)).unwrap();
        // second path through the public primitives
        let mut left = DMatrix::zeros(4, 4);
        let mut right = DMatrix::zeros(3, 3);
        for m in &items {
            left += m * m.transpose();
            right += m.transpose() * m;
        }
        let sl = schatten_norm(
            matrix_sqrt(&SymOperator::new(left).unwrap())
                .unwrap()
                .matrix(),
            Q::Finite(1.0),
        )
        .unwrap();
        let sr = schatten_norm(
            matrix_sqrt(&SymOperator::new(right).unwrap())
                .unwrap()
                .matrix(),
            Q::Finite(1.0),
        )
        .unwrap();
        assert_relative_eq!(s, sl.max(sr), max_relative = 1e-8);
    }

    #[test]
    fn noncomm_scale_rejects_empty() {
        assert!(noncomm_scale(&[], Q::Finite(1.0)).is_err());
    }

    #[test]
    fn procrustes_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = random_sym_psd(5, &mut rng);
        let align = procrustes_delta(&a, &a).unwrap();
        assert!(
            align.delta.norm() <= 1e-8,
            "delta norm {}",
            align.delta.norm()
        );
    }

    #[test]
    fn procrustes_diagonal_case() {
        let a = SymOperator::identity(3);
        let b = SymOperator::new(DMatrix::identity(3, 3) * 4.0).unwrap();
        let align = procrustes_delta(&a, &b).unwrap();
        assert!((align.delta.clone() - DMatrix::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn procrustes_rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_sym_psd(6, &mut rng);
        let b = random_sym_psd(6, &mut rng);
        let align = procrustes_delta(&a, &b).unwrap();
        let orth = (align.rotation.transpose() * &align.rotation - DMatrix::identity(6, 6)).norm();
        assert!(orth <= 1e-8, "orthogonality residual {orth}");
    }

    #[test]
    fn covariance_path_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a = random_sym_psd(6, &mut rng);
        let b = random_sym_psd(6, &mut rng);
        let at0 = covariance_path(&a, &b, 0.0).unwrap();
        assert!((at0.matrix() - a.matrix()).norm() / a.matrix().norm() <= 1e-8);
        let at1 = covariance_path(&a, &b, 1.0).unwrap();
        assert!((at1.matrix() - b.matrix()).norm() / b.matrix().norm() <= 1e-8);
        // midpoint stays PSD
        let mid = covariance_path(&a, &b, 0.5).unwrap();
        let (vals, _) = sym_eig(&mid).unwrap();
        assert!(vals[vals.len() - 1] >= -1e-8 * vals[0].max(1e-300));
    }

    #[test]
    fn decomposition_counter_moves() {
        let before = decomposition_count();
        let a = SymOperator::identity(3);
        let _ = sym_eig(&a).unwrap();
        assert!(decomposition_count() > before);
        // q = 2 fast paths must not count
        let mid = decomposition_count();
        let m = DMatrix::<f64>::identity(5, 5);
        let _ = schatten_norm(&m, Q::Finite(2.0)).unwrap();
        let _ = psd_sqrt_schatten(&a, Q::Finite(2.0)).unwrap();
        assert_eq!(decomposition_count(), mid);
    }

    #[cfg(test)]
    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn grid_curve_rejects_bad_grids(n in 2usize..6) {
                let grid: Vec<f64> = (0..n).map(|i| i as f64).collect();
                let mut bad = grid.clone();
                bad[n - 1] = bad[n - 2]; // not strictly increasing
                prop_assert!(GridCurve::new(bad, vec![0.0; n]).is_err());
                prop_assert!(GridCurve::new(grid, vec![0.0; n]).is_ok());
            }

            #[test]
            fn lq_vector_norm_monotone_in_inverse_q(
                v in proptest::collection::vec(-10.0f64..10.0, 1..12),
            ) {
                let n1 = lq_vector_norm(&v, Q::Finite(1.0));
                let n2 = lq_vector_norm(&v, Q::Finite(2.0));
                let ninf = lq_vector_norm(&v, Q::Inf);
                prop_assert!(n1 >= n2 - 1e-12);
                prop_assert!(n2 >= ninf - 1e-12);
            }
        }
    }
}
