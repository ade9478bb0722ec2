//! Matrix-free symmetric operators.
//!
//! Every solver in the crate talks to the Hessian only through
//! [`HvpOracle`]. [`DenseOperator`] is the explicit reference backend used
//! by brute-force oracles and the small demos; it refuses dimensions above
//! a cap so that dense checks stay desk-sized.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng;

/// Largest dimension a [`DenseOperator`] accepts unless overridden.
pub const DEFAULT_DENSE_CAP: usize = 2000;

const SYMMETRY_PROBES: usize = 3;
const SYMMETRY_TOL: f64 = 1e-6;
const PROBE_SEED: u64 = 0x5eed0f4e55;

/// Symmetric linear operator accessed through products.
///
/// Implementations must be deterministic and reentrant: equal inputs give
/// bit-identical outputs, and concurrent calls are allowed.
pub trait HvpOracle: Send + Sync {
    fn dim(&self) -> usize;

    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;

    /// Applies the operator to every column of `block`.
    ///
    /// Backends that can batch products (one matrix-matrix product instead of
    /// many matrix-vector ones) should override this.
    fn apply_block(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), block.ncols());
        for (j, col) in block.column_iter().enumerate() {
            out.set_column(j, &self.apply(&col.into_owned()));
        }
        out
    }

    /// The exact diagonal, when the backend can produce it without `p` products.
    fn diagonal(&self) -> Option<DVector<f64>> {
        None
    }
}

macro_rules! forward_oracle {
    ($($ty:ty),*) => {$(
        impl<T: HvpOracle + ?Sized> HvpOracle for $ty {
            fn dim(&self) -> usize { (**self).dim() }
            fn apply(&self, v: &DVector<f64>) -> DVector<f64> { (**self).apply(v) }
            fn apply_block(&self, block: &DMatrix<f64>) -> DMatrix<f64> { (**self).apply_block(block) }
            fn diagonal(&self) -> Option<DVector<f64>> { (**self).diagonal() }
        }
    )*};
}

forward_oracle!(&T, Box<T>, Arc<T>);

/// Explicit symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        Self::with_cap(matrix, DEFAULT_DENSE_CAP)
    }

    /// Accepts `matrix` if it is square, at most `cap` wide and symmetric up to
    /// roundoff; the stored copy is then symmetrized exactly.
    pub fn with_cap(mut matrix: DMatrix<f64>, cap: usize) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid(format!(
                "dense operator must be square, got {}×{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let n = matrix.nrows();
        if n == 0 {
            return Err(Error::invalid("dense operator must have positive dimension"));
        }
        if n > cap {
            return Err(Error::Capability { dim: n, cap });
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("dense operator has non-finite entries"));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::invalid(format!(
                "dense operator is not symmetric (max |M - Mᵀ| = {asym:e})"
            )));
        }
        rng::symmetrize(&mut matrix);
        Ok(Self { matrix })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self {
            matrix: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

impl HvpOracle for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    fn apply_block(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrix * block
    }

    fn diagonal(&self) -> Option<DVector<f64>> {
        Some(self.matrix.diagonal())
    }
}

/// Whether a closure-backed oracle is probed for symmetry when built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SymmetryCheck {
    #[default]
    Probe,
    Skip,
}

/// Oracle backed by a closure `v ↦ Hv`.
pub struct FnOracle<F> {
    dim: usize,
    f: F,
}

impl<F> FnOracle<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Result<Self> {
        Self::with_check(dim, f, SymmetryCheck::Probe)
    }

    pub fn with_check(dim: usize, f: F, check: SymmetryCheck) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("oracle dimension must be positive"));
        }
        let op = Self { dim, f };
        if check == SymmetryCheck::Probe {
            probe_symmetry(&op, SYMMETRY_PROBES, SYMMETRY_TOL, PROBE_SEED)?;
        }
        Ok(op)
    }
}

impl<F> HvpOracle for FnOracle<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.f)(v)
    }
}

/// Wraps an oracle and counts the vectors pushed through it.
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O: HvpOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of operator-vector products so far (a block counts one per column).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: HvpOracle> HvpOracle for CountingOracle<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(v)
    }

    fn apply_block(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        self.calls.fetch_add(block.ncols(), Ordering::Relaxed);
        self.inner.apply_block(block)
    }

    fn diagonal(&self) -> Option<DVector<f64>> {
        self.inner.diagonal()
    }
}

/// Checks `uᵀ(Hv) = vᵀ(Hu)` on `probes` random pairs at relative tolerance `tol`.
pub fn probe_symmetry(op: &dyn HvpOracle, probes: usize, tol: f64, seed: u64) -> Result<()> {
    let mut rng = rng::seeded(seed);
    let n = op.dim();
    for probe in 0..probes {
        let u = rng::normal_vector(&mut rng, n);
        let v = rng::normal_vector(&mut rng, n);
        let hu = op.apply(&u);
        let hv = op.apply(&v);
        check_dim(&hu, n, "oracle output")?;
        let lhs = u.dot(&hv);
        let rhs = v.dot(&hu);
        let scale = (u.norm() * hv.norm()).max(v.norm() * hu.norm());
        if !(lhs - rhs).is_finite() || (lhs - rhs).abs() > tol * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::invalid(format!(
                "oracle failed symmetry probe {probe}: uᵀHv = {lhs:e}, vᵀHu = {rhs:e}"
            )));
        }
    }
    Ok(())
}

/// Checks `H(au + bv) = aHu + bHv` on `probes` random draws at relative tolerance `tol`.
pub fn probe_linearity(op: &dyn HvpOracle, probes: usize, tol: f64, seed: u64) -> Result<()> {
    let mut rng = rng::seeded(seed);
    let n = op.dim();
    for probe in 0..probes {
        let u = rng::normal_vector(&mut rng, n);
        let v = rng::normal_vector(&mut rng, n);
        let ab = rng::normal_vector(&mut rng, 2);
        let (a, b) = (ab[0], ab[1]);
        let combined = op.apply(&(&u * a + &v * b));
        let separate = op.apply(&u) * a + op.apply(&v) * b;
        let scale = combined.norm().max(separate.norm()).max(f64::MIN_POSITIVE);
        if (&combined - &separate).norm() > tol * scale {
            return Err(Error::invalid(format!("oracle failed linearity probe {probe}")));
        }
    }
    Ok(())
}

pub(crate) fn check_dim(v: &DVector<f64>, expected: usize, what: &str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::invalid(format!(
            "{what} has length {}, expected {expected}",
            v.len()
        )));
    }
    Ok(())
}

/// The `i`-th column of `H`, obtained as `H e_i`.
pub fn hvp_column(op: &dyn HvpOracle, i: usize) -> Result<DVector<f64>> {
    let n = op.dim();
    if i >= n {
        return Err(Error::invalid(format!("column {i} out of range for dimension {n}")));
    }
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    Ok(op.apply(&e))
}

fn shifted(m: &DenseOperator, rho: f64) -> DMatrix<f64> {
    let mut a = m.matrix.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += rho;
    }
    a
}

/// Solves `(M + ρI)x = b` with a dense factorization.
///
/// Cholesky is tried first and LU with partial pivoting is the fallback for
/// shifted matrices that are not positive definite. One step of iterative
/// refinement is applied when the residual misses `1e-10‖b‖`.
pub fn dense_regularized_inverse_apply(
    m: &DenseOperator,
    rho: f64,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    check_dim(b, m.dim(), "right-hand side")?;
    let a = shifted(m, rho);
    let solve = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
        match a.clone().cholesky() {
            Some(chol) => Some(chol.solve(rhs)),
            None => a.clone().lu().solve(rhs),
        }
    };
    let mut x = solve(b).ok_or_else(|| Error::ill_conditioned("M + ρI is singular"))?;
    let tol = 1e-10 * b.norm();
    let mut residual = b - &a * &x;
    if residual.norm() > tol {
        if let Some(dx) = solve(&residual) {
            x += dx;
            residual = b - &a * &x;
        }
    }
    if !x.iter().all(|v| v.is_finite()) || residual.norm() > tol {
        return Err(Error::ill_conditioned(format!(
            "dense solve residual {:e} exceeds {tol:e}",
            residual.norm()
        )));
    }
    Ok(x)
}

/// `(M + ρI)⁻¹` as an explicit matrix.
pub fn dense_regularized_inverse(m: &DenseOperator, rho: f64) -> Result<DMatrix<f64>> {
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    let a = shifted(m, rho);
    let n = a.nrows();
    let inv = match a.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => a
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::ill_conditioned("M + ρI is singular"))?,
    };
    if inv.iter().any(|v| !v.is_finite()) || inv.nrows() != n {
        return Err(Error::ill_conditioned("M + ρI inverse is not finite"));
    }
    Ok(inv)
}

const EIGEN_MAX_ITERS: usize = 10_000;

/// Eigenvalues of a symmetric matrix (unsorted).
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    m.clone()
        .try_symmetric_eigen(f64::EPSILON, EIGEN_MAX_ITERS)
        .map(|e| e.eigenvalues)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))
}

/// Spectral norm of a symmetric operator: the largest absolute eigenvalue.
pub fn operator_norm(m: &DenseOperator) -> Result<f64> {
    Ok(symmetric_eigenvalues(&m.matrix)?.amax())
}

/// Largest singular value of a rectangular matrix.
pub fn operator_norm_rect(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    let svd = m
        .clone()
        .try_svd(false, false, f64::EPSILON, EIGEN_MAX_ITERS)
        .ok_or_else(|| Error::Numerical("singular value decomposition did not converge".into()))?;
    Ok(svd.singular_values.max())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_symmetric(n: usize, seed: u64) -> DenseOperator {
        let mut r = rng::seeded(seed);
        let g = rng::normal_matrix(&mut r, n, n);
        DenseOperator::new(&g + g.transpose()).unwrap()
    }

    fn power_iteration(m: &DMatrix<f64>, iters: usize) -> f64 {
        // on M² so that ±λ_max do not cancel
        let m2 = m * m;
        let mut v = DVector::from_element(m.nrows(), 1.0);
        let mut est = 0.0;
        for _ in 0..iters {
            let w = &m2 * &v;
            est = w.norm() / v.norm();
            v = w.normalize();
        }
        est.sqrt()
    }

    #[test]
    fn identity_and_diagonal_columns() {
        let id = DenseOperator::identity(3);
        assert_eq!(hvp_column(&id, 1).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
        let d = DenseOperator::from_diagonal(&[2.0, 3.0]);
        assert_eq!(hvp_column(&d, 0).unwrap().as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn columns_reconstruct_dense_matrix() {
        let op = random_symmetric(10, 3);
        assert_eq!(hvp_column(&op, 4).unwrap(), op.matrix().column(4).into_owned());
        for i in 0..10 {
            assert_eq!(hvp_column(&op, i).unwrap(), op.matrix().column(i).into_owned());
        }
    }

    #[test]
    fn column_out_of_range() {
        let op = DenseOperator::identity(3);
        assert!(matches!(hvp_column(&op, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rejects_asymmetric_and_oversized() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(DenseOperator::new(m).is_err());
        let big = DMatrix::identity(5, 5);
        assert!(matches!(
            DenseOperator::with_cap(big, 4),
            Err(Error::Capability { dim: 5, cap: 4 })
        ));
    }

    #[test]
    fn regularized_inverse_trivial_cases() {
        let zero = DenseOperator::new(DMatrix::zeros(2, 2)).unwrap();
        let x = dense_regularized_inverse_apply(&zero, 0.5, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((x - DVector::from_vec(vec![2.0, 2.0])).amax() < 1e-15);

        let id = DenseOperator::identity(3);
        let x = dense_regularized_inverse_apply(&id, 1.0, &DVector::from_vec(vec![2.0, 0.0, 4.0])).unwrap();
        assert!((x - DVector::from_vec(vec![1.0, 0.0, 2.0])).amax() < 1e-15);
    }

    #[test]
    fn regularized_inverse_residual_on_psd() {
        let mut r = rng::seeded(11);
        let m = DenseOperator::new(rng::gram_psd(&mut r, 20, 20)).unwrap();
        let b = rng::normal_vector(&mut r, 20);
        let x = dense_regularized_inverse_apply(&m, 0.01, &b).unwrap();
        let res = m.matrix() * &x + &x * 0.01 - &b;
        assert!(res.norm() <= 1e-10 * b.norm());
    }

    #[test]
    fn singular_shift_is_reported() {
        // M + ρI = 0
        let m = DenseOperator::from_diagonal(&[-1.0, -1.0]);
        let err = dense_regularized_inverse_apply(&m, 1.0, &DVector::from_vec(vec![1.0, 1.0]));
        assert!(matches!(err, Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn operator_norms() {
        let d = DenseOperator::from_diagonal(&[1.0, -3.0, 2.0]);
        assert!((operator_norm(&d).unwrap() - 3.0).abs() < 1e-14);
        let ones = DenseOperator::new(DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert!((operator_norm(&ones).unwrap() - 2.0).abs() < 1e-14);

        let op = random_symmetric(15, 5);
        let exact = operator_norm(&op).unwrap();
        let est = power_iteration(op.matrix(), 5000);
        assert!((exact - est).abs() <= 1e-6 * exact, "{exact} vs {est}");
    }

    #[test]
    fn rectangular_norm_matches_gram_eigenvalue() {
        let mut r = rng::seeded(8);
        let f = rng::normal_matrix(&mut r, 7, 4);
        let gram = DenseOperator::new(f.transpose() * &f).unwrap();
        let sigma = operator_norm_rect(&f).unwrap();
        assert!((sigma * sigma - operator_norm(&gram).unwrap()).abs() < 1e-10 * sigma * sigma);
    }

    #[test]
    fn fn_oracle_symmetry_probe() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 0.0, 1.0]);
        let asym = FnOracle::new(2, move |v: &DVector<f64>| &a * v);
        assert!(asym.is_err());
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 0.0, 1.0]);
        assert!(FnOracle::with_check(2, move |v: &DVector<f64>| &a * v, SymmetryCheck::Skip).is_ok());
    }

    #[test]
    fn dense_operator_probes() {
        let op = random_symmetric(30, 9);
        probe_symmetry(&op, 100, 1e-8, 1).unwrap();
        probe_linearity(&op, 100, 1e-8, 2).unwrap();
        let v = DVector::from_element(30, 0.25);
        assert_eq!(op.apply(&v), op.apply(&v));
    }

    #[test]
    fn counting_oracle_counts_block_columns() {
        let op = CountingOracle::new(DenseOperator::identity(4));
        op.apply(&DVector::zeros(4));
        op.apply_block(&DMatrix::zeros(4, 3));
        assert_eq!(op.calls(), 4);
    }
}
