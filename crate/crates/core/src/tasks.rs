//! Synthetic problems with analytic derivatives.
//!
//! * [`make_lowrank_demo`]: a rank-deficient PSD matrix for the inverse
//!   comparison demo.
//! * [`LogRegTask`]: per-parameter weight decay for logistic regression,
//!   `f(θ, φ) = BCE_train(θ) + θᵀ diag(φ) θ`, `g(θ, φ) = BCE_val(θ)`.
//! * [`QuadraticTask`]: `f = ½θᵀAθ − bᵀθ + ½θᵀdiag(φ)θ`,
//!   `g = ½‖θ − θ_target‖²`, whose hypergradient has a closed form.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::bilevel::{Batch, BilevelProblem};
use crate::error::{Error, Result};
use crate::hypergrad::{DerivativeBundle, DiagonalMixed, MixedPartial};
use crate::linop::{DenseOperator, HvpOracle};
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowRankDemoSpec {
    pub p: usize,
    pub rank: usize,
    pub rho: f64,
    pub seed: u64,
}

impl Default for LowRankDemoSpec {
    fn default() -> Self {
        Self {
            p: 40,
            rank: 20,
            rho: 0.1,
            seed: 0,
        }
    }
}

/// `H = G Gᵀ` with `G` a `p × rank` standard-normal draw.
pub fn make_lowrank_demo(spec: &LowRankDemoSpec) -> Result<DenseOperator> {
    if spec.rank == 0 || spec.rank > spec.p {
        return Err(Error::invalid(format!("need 1 ≤ rank ≤ p, got rank {} for p {}", spec.rank, spec.p)));
    }
    if !(spec.rho > 0.0) {
        return Err(Error::invalid("rho must be positive"));
    }
    let mut r = rng::seeded(spec.seed);
    DenseOperator::new(rng::gram_psd(&mut r, spec.p, spec.rank))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) − y z`, stable for large `|z|`.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRegTaskSpec {
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for LogRegTaskSpec {
    fn default() -> Self {
        Self {
            dim: 100,
            n_train: 500,
            n_val: 500,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
struct Dataset {
    x: Arc<DMatrix<f64>>,
    y: DVector<f64>,
}

impl Dataset {
    fn draw(rng: &mut SeededRng, n: usize, w_star: &DVector<f64>, noise: &Normal<f64>) -> Self {
        let dim = w_star.len();
        // rows are examples
        let x = rng::normal_matrix(rng, dim, n).transpose();
        let logits = &x * w_star;
        let y = DVector::from_iterator(
            n,
            logits.iter().map(|z| if z + rng.sample(noise) > 0.0 { 1.0 } else { 0.0 }),
        );
        Self { x: Arc::new(x), y }
    }

    fn rows(&self, batch: Batch) -> (DMatrix<f64>, DVector<f64>) {
        match batch {
            Batch::Full => ((*self.x).clone(), self.y.clone()),
            Batch::Indices(idx) => (self.x.select_rows(idx), DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]))),
        }
    }
}

fn mean_bce(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    let z = x * theta;
    z.iter().zip(y.iter()).map(|(z, y)| bce_with_logit(*z, *y)).sum::<f64>() / y.len() as f64
}

fn mean_bce_grad(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
    let z = x * theta;
    let resid = DVector::from_iterator(y.len(), z.iter().zip(y.iter()).map(|(z, y)| sigmoid(*z) - y));
    x.tr_mul(&resid) / y.len() as f64
}

/// Weight-decay tuning for logistic regression on Gaussian inputs with labels
/// `y = [w★ᵀx + ε > 0]`, `ε ~ N(0, σ²)` per example.
#[derive(Debug, Clone)]
pub struct LogRegTask {
    spec: LogRegTaskSpec,
    w_star: DVector<f64>,
    train: Dataset,
    val: Dataset,
}

impl LogRegTask {
    pub fn generate(spec: &LogRegTaskSpec) -> Result<Self> {
        if spec.dim == 0 || spec.n_train == 0 || spec.n_val == 0 {
            return Err(Error::invalid("logistic task needs positive dimension and sample counts"));
        }
        let noise = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::invalid(format!("noise_sigma: {e}")))?;
        let mut r = rng::seeded(spec.seed);
        let w_star = rng::normal_vector(&mut r, spec.dim);
        let train = Dataset::draw(&mut r, spec.n_train, &w_star, &noise);
        let val = Dataset::draw(&mut r, spec.n_val, &w_star, &noise);
        Ok(Self {
            spec: *spec,
            w_star,
            train,
            val,
        })
    }

    pub fn spec(&self) -> &LogRegTaskSpec {
        &self.spec
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn inputs(&self, split: Split) -> &DMatrix<f64> {
        &self.data(split).x
    }

    pub fn labels(&self, split: Split) -> &DVector<f64> {
        &self.data(split).y
    }

    fn data(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Unregularized mean BCE on a split.
    pub fn bce(&self, split: Split, theta: &DVector<f64>) -> f64 {
        let d = self.data(split);
        mean_bce(&d.x, &d.y, theta)
    }

    pub fn bce_grad(&self, split: Split, theta: &DVector<f64>) -> DVector<f64> {
        let d = self.data(split);
        mean_bce_grad(&d.x, &d.y, theta)
    }

    /// Hessian of the inner objective on `split`:
    /// `v ↦ Xᵀ(s ⊙ Xv)/n + 2φ ⊙ v` with `s = σ(Xθ)(1 − σ(Xθ))`.
    pub fn hessian(&self, split: Split, theta: &DVector<f64>, phi: &DVector<f64>) -> LogRegHessian {
        let d = self.data(split);
        let n = d.y.len() as f64;
        let curvature = (&*d.x * theta).map(|z| {
            let s = sigmoid(z);
            s * (1.0 - s) / n
        });
        LogRegHessian {
            x: Arc::clone(&d.x),
            curvature,
            decay: phi * 2.0,
        }
    }

    /// Derivative oracles at `(θ, φ)`: Hessian and mixed partial from `split`,
    /// outer gradients from the validation set. Also returns `(inner loss, outer loss)`.
    pub fn bundle(&self, theta: &DVector<f64>, phi: &DVector<f64>, split: Split) -> Result<(DerivativeBundle, f64, f64)> {
        let bundle = DerivativeBundle::new(
            self.bce_grad(Split::Val, theta),
            DVector::zeros(self.spec.dim),
            Box::new(self.hessian(split, theta, phi)),
            Box::new(DiagonalMixed::new(theta * 2.0)),
        )?;
        let inner = self.bce(split, theta) + regularizer(theta, phi);
        Ok((bundle, inner, self.bce(Split::Val, theta)))
    }
}

fn regularizer(theta: &DVector<f64>, phi: &DVector<f64>) -> f64 {
    theta.iter().zip(phi.iter()).map(|(t, p)| p * t * t).sum()
}

/// Matrix-free logistic-regression Hessian; block products use one GEMM pair.
#[derive(Debug, Clone)]
pub struct LogRegHessian {
    x: Arc<DMatrix<f64>>,
    /// `s_i / n`
    curvature: DVector<f64>,
    /// `2φ`
    decay: DVector<f64>,
}

impl HvpOracle for LogRegHessian {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let xv = (&*self.x * v).component_mul(&self.curvature);
        self.x.tr_mul(&xv) + self.decay.component_mul(v)
    }

    fn apply_block(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        let mut xv = gemm(&self.x, false, block);
        for mut col in xv.column_iter_mut() {
            col.component_mul_assign(&self.curvature);
        }
        let mut out = gemm(&self.x, true, &xv);
        for (mut col, vcol) in out.column_iter_mut().zip(block.column_iter()) {
            col += self.decay.component_mul(&vcol);
        }
        out
    }

    fn diagonal(&self) -> Option<DVector<f64>> {
        let mut diag = self.decay.clone();
        for (i, row) in self.x.row_iter().enumerate() {
            let s = self.curvature[i];
            for (j, xij) in row.iter().enumerate() {
                diag[j] += s * xij * xij;
            }
        }
        Some(diag)
    }
}

/// `op(a) · b` with `op` the identity or transpose, always through a blocked
/// GEMM. nalgebra falls back to one matrix-vector product per column when a
/// dimension is small, which sweeps a wide `a` once per column of `b`.
fn gemm(a: &DMatrix<f64>, transpose_a: bool, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, k) = if transpose_a { (a.ncols(), a.nrows()) } else { (a.nrows(), a.ncols()) };
    assert_eq!(k, b.nrows(), "gemm: inner dimensions differ");
    let n = b.ncols();
    let mut out = DMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // column-major storage: element (i, j) of `a` sits at i + j·lda
    let lda = a.nrows() as isize;
    let (rsa, csa) = if transpose_a { (lda, 1) } else { (1, lda) };
    // SAFETY: the pointers cover buffers of exactly the given shapes and strides,
    // and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            1,
            b.nrows() as isize,
            0.0,
            out.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    out
}

/// Standard deviation of the inner-parameter initialization.
pub const LOGREG_INIT_STD: f64 = 0.01;

impl BilevelProblem for LogRegTask {
    fn inner_dim(&self) -> usize {
        self.spec.dim
    }

    fn outer_dim(&self) -> usize {
        self.spec.dim
    }

    fn train_size(&self) -> usize {
        self.spec.n_train
    }

    fn init_inner(&self, rng: &mut SeededRng) -> DVector<f64> {
        rng::normal_vector(rng, self.spec.dim) * LOGREG_INIT_STD
    }

    fn init_outer(&self) -> DVector<f64> {
        DVector::from_element(self.spec.dim, 1.0)
    }

    fn inner_loss(&self, theta: &DVector<f64>, phi: &DVector<f64>, batch: Batch) -> f64 {
        let bce = match batch {
            Batch::Full => self.bce(Split::Train, theta),
            Batch::Indices(_) => {
                let (x, y) = self.train.rows(batch);
                mean_bce(&x, &y, theta)
            }
        };
        bce + regularizer(theta, phi)
    }

    fn inner_grad(&self, theta: &DVector<f64>, phi: &DVector<f64>, batch: Batch) -> DVector<f64> {
        let grad = match batch {
            Batch::Full => self.bce_grad(Split::Train, theta),
            Batch::Indices(_) => {
                let (x, y) = self.train.rows(batch);
                mean_bce_grad(&x, &y, theta)
            }
        };
        grad + theta.component_mul(phi) * 2.0
    }

    fn outer_loss(&self, theta: &DVector<f64>, _phi: &DVector<f64>) -> f64 {
        self.bce(Split::Val, theta)
    }

    fn outer_grad_theta(&self, theta: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
        self.bce_grad(Split::Val, theta)
    }

    fn outer_grad_phi(&self, _theta: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(phi.len())
    }

    fn hvp_at(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> Box<dyn HvpOracle> {
        Box::new(self.hessian(Split::Train, theta, phi))
    }

    fn mixed_at(&self, theta: &DVector<f64>, _phi: &DVector<f64>) -> Box<dyn MixedPartial> {
        Box::new(DiagonalMixed::new(theta * 2.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticTaskSpec {
    pub p: usize,
    pub seed: u64,
}

/// Quadratic bilevel problem with `h = p`.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    a: Arc<DMatrix<f64>>,
    b: DVector<f64>,
    target: DVector<f64>,
    phi0: DVector<f64>,
}

impl QuadraticTask {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, target: DVector<f64>) -> Result<Self> {
        let p = b.len();
        if a.shape() != (p, p) || target.len() != p || p == 0 {
            return Err(Error::invalid("quadratic task dimensions disagree"));
        }
        let a = DenseOperator::new(a)?.into_matrix();
        if a.clone().cholesky().is_none() {
            return Err(Error::invalid("A must be symmetric positive definite"));
        }
        Ok(Self {
            a: Arc::new(a),
            b,
            target,
            phi0: DVector::from_element(p, 1.0),
        })
    }

    /// `A = GGᵀ/p + I/2`, `b`, `θ_target` standard normal.
    pub fn random(spec: &QuadraticTaskSpec) -> Result<Self> {
        if spec.p == 0 {
            return Err(Error::invalid("p must be positive"));
        }
        let mut r = rng::seeded(spec.seed);
        let mut a = rng::gram_psd(&mut r, spec.p, spec.p) / spec.p as f64;
        for i in 0..spec.p {
            a[(i, i)] += 0.5;
        }
        let b = rng::normal_vector(&mut r, spec.p);
        let target = rng::normal_vector(&mut r, spec.p);
        Self::new(a, b, target)
    }

    pub fn with_initial_phi(mut self, phi0: DVector<f64>) -> Result<Self> {
        if phi0.len() != self.b.len() {
            return Err(Error::invalid("initial φ has the wrong length"));
        }
        self.phi0 = phi0;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    fn shifted(&self, phi: &DVector<f64>) -> DMatrix<f64> {
        &*self.a + DMatrix::from_diagonal(phi)
    }

    /// `θ★(φ) = (A + diag φ)⁻¹ b`.
    pub fn inner_optimum(&self, phi: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self
            .shifted(phi)
            .cholesky()
            .ok_or_else(|| Error::ill_conditioned("A + diag(φ) is not positive definite"))?;
        Ok(chol.solve(&self.b))
    }

    /// `H = A + diag φ` as a dense operator.
    pub fn dense_hessian(&self, phi: &DVector<f64>) -> Result<DenseOperator> {
        DenseOperator::new(self.shifted(phi))
    }
}

/// Exact `dg/dφ = −diag(θ★)(A + diag φ)⁻¹(θ★ − θ_target)`.
pub fn quadratic_closed_form_hypergradient(task: &QuadraticTask, phi: &DVector<f64>) -> Result<DVector<f64>> {
    let shifted = task.shifted(phi);
    let chol = shifted
        .cholesky()
        .ok_or_else(|| Error::ill_conditioned("A + diag(φ) is not positive definite"))?;
    let theta = chol.solve(&task.b);
    let adj = chol.solve(&(&theta - &task.target));
    Ok(-theta.component_mul(&adj))
}

/// `v ↦ Av + φ ⊙ v`.
#[derive(Debug, Clone)]
pub struct QuadraticHessian {
    a: Arc<DMatrix<f64>>,
    phi: DVector<f64>,
}

impl HvpOracle for QuadraticHessian {
    fn dim(&self) -> usize {
        self.phi.len()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &*self.a * v + self.phi.component_mul(v)
    }

    fn diagonal(&self) -> Option<DVector<f64>> {
        Some(self.a.diagonal() + &self.phi)
    }
}

impl BilevelProblem for QuadraticTask {
    fn inner_dim(&self) -> usize {
        self.dim()
    }

    fn outer_dim(&self) -> usize {
        self.dim()
    }

    fn init_inner(&self, rng: &mut SeededRng) -> DVector<f64> {
        rng::normal_vector(rng, self.dim())
    }

    fn init_outer(&self) -> DVector<f64> {
        self.phi0.clone()
    }

    fn inner_loss(&self, theta: &DVector<f64>, phi: &DVector<f64>, _batch: Batch) -> f64 {
        0.5 * theta.dot(&(&*self.a * theta)) - self.b.dot(theta) + 0.5 * regularizer(theta, phi)
    }

    fn inner_grad(&self, theta: &DVector<f64>, phi: &DVector<f64>, _batch: Batch) -> DVector<f64> {
        &*self.a * theta - &self.b + phi.component_mul(theta)
    }

    fn outer_loss(&self, theta: &DVector<f64>, _phi: &DVector<f64>) -> f64 {
        0.5 * (theta - &self.target).norm_squared()
    }

    fn outer_grad_theta(&self, theta: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
        theta - &self.target
    }

    fn outer_grad_phi(&self, _theta: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(phi.len())
    }

    fn hvp_at(&self, _theta: &DVector<f64>, phi: &DVector<f64>) -> Box<dyn HvpOracle> {
        Box::new(QuadraticHessian {
            a: Arc::clone(&self.a),
            phi: phi.clone(),
        })
    }

    fn mixed_at(&self, theta: &DVector<f64>, _phi: &DVector<f64>) -> Box<dyn MixedPartial> {
        Box::new(DiagonalMixed::new(theta.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{self, probe_symmetry};

    #[test]
    fn lowrank_demo_ranks() {
        let full = make_lowrank_demo(&LowRankDemoSpec { p: 12, rank: 12, rho: 0.1, seed: 1 }).unwrap();
        assert!(linop::symmetric_eigenvalues(full.matrix()).unwrap().min() > 0.0);

        let one = LowRankDemoSpec { p: 8, rank: 1, rho: 0.1, seed: 2 };
        let h = make_lowrank_demo(&one).unwrap();
        let mut r = rng::seeded(2);
        let g = rng::normal_vector(&mut r, 8);
        let norm = linop::operator_norm(&h).unwrap();
        assert!((norm - g.norm_squared()).abs() < 1e-12 * norm);

        let fig = make_lowrank_demo(&LowRankDemoSpec::default()).unwrap();
        let eig = linop::symmetric_eigenvalues(fig.matrix()).unwrap();
        let top = eig.amax();
        assert_eq!(eig.iter().filter(|l| **l > 1e-8 * top).count(), 20);
    }

    #[test]
    fn logreg_at_origin() {
        let spec = LogRegTaskSpec { dim: 6, n_train: 20, n_val: 10, ..Default::default() };
        let task = LogRegTask::generate(&spec).unwrap();
        let theta = DVector::zeros(6);
        let phi = DVector::from_vec(vec![0.5, 1.0, 0.0, 2.0, 0.1, 0.3]);
        let grad = task.inner_grad(&theta, &phi, Batch::Full);
        let x = task.inputs(Split::Train);
        let y = task.labels(Split::Train);
        let want = x.tr_mul(&y.map(|y| 0.5 - y)) / 20.0;
        assert!((grad - want).amax() < 1e-15);

        let h = task.hvp_at(&theta, &phi);
        let dense = x.tr_mul(x) / 80.0 + DMatrix::from_diagonal(&(&phi * 2.0));
        let v = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        assert!((h.apply(&v) - &dense * &v).amax() < 1e-12);
        assert!((h.diagonal().unwrap() - dense.diagonal()).amax() < 1e-12);
        let block = DMatrix::from_fn(6, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        assert!((h.apply_block(&block) - &dense * &block).amax() < 1e-12);
        assert!((task.inner_loss(&theta, &phi, Batch::Full) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logreg_outer_phi_gradient_is_zero() {
        let task = LogRegTask::generate(&LogRegTaskSpec { dim: 5, n_train: 30, n_val: 30, ..Default::default() }).unwrap();
        let theta = DVector::from_element(5, 0.3);
        let phi = DVector::from_element(5, 1.0);
        let (bundle, _, _) = task.bundle(&theta, &phi, Split::Train).unwrap();
        assert!(bundle.grad_outer_phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn logreg_hessian_psd_for_nonnegative_phi() {
        let task = LogRegTask::generate(&LogRegTaskSpec { dim: 10, n_train: 40, n_val: 10, ..Default::default() }).unwrap();
        let mut r = rng::seeded(5);
        let theta = rng::normal_vector(&mut r, 10);
        let phi = DVector::from_element(10, 0.0);
        let h = task.hvp_at(&theta, &phi);
        probe_symmetry(&*h, 20, 1e-10, 3).unwrap();
        for _ in 0..50 {
            let v = rng::normal_vector(&mut r, 10);
            assert!(v.dot(&h.apply(&v)) >= 0.0);
        }
    }

    #[test]
    fn logreg_generation_is_seeded() {
        let spec = LogRegTaskSpec { dim: 4, n_train: 8, n_val: 8, seed: 9, ..Default::default() };
        let a = LogRegTask::generate(&spec).unwrap();
        let b = LogRegTask::generate(&spec).unwrap();
        assert_eq!(a.inputs(Split::Train), b.inputs(Split::Train));
        assert_eq!(a.labels(Split::Val), b.labels(Split::Val));
        assert!(a.labels(Split::Train).iter().all(|y| *y == 0.0 || *y == 1.0));
    }

    #[test]
    fn minibatch_gradient_matches_subset() {
        let task = LogRegTask::generate(&LogRegTaskSpec { dim: 3, n_train: 10, n_val: 4, ..Default::default() }).unwrap();
        let theta = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let phi = DVector::from_element(3, 0.5);
        let all: Vec<usize> = (0..10).collect();
        let full = task.inner_grad(&theta, &phi, Batch::Full);
        let via_idx = task.inner_grad(&theta, &phi, Batch::Indices(&all));
        assert!((full - via_idx).amax() < 1e-15);
    }

    #[test]
    fn scalar_closed_form() {
        let task = QuadraticTask::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let h = quadratic_closed_form_hypergradient(&task, &DVector::from_element(1, 1.0)).unwrap();
        assert!((h[0] + 0.125).abs() < 1e-15);
    }

    #[test]
    fn closed_form_vanishes_at_outer_optimum() {
        let base = QuadraticTask::random(&QuadraticTaskSpec { p: 6, seed: 3 }).unwrap();
        let phi = DVector::from_element(6, 0.7);
        let star = base.inner_optimum(&phi).unwrap();
        let task = QuadraticTask::new(base.a().clone(), base.b.clone(), star).unwrap();
        let h = quadratic_closed_form_hypergradient(&task, &phi).unwrap();
        assert!(h.amax() < 1e-14);
    }

    #[test]
    fn quadratic_inner_gradient_vanishes_at_optimum() {
        let task = QuadraticTask::random(&QuadraticTaskSpec { p: 15, seed: 4 }).unwrap();
        let phi = DVector::from_element(15, 0.2);
        let star = task.inner_optimum(&phi).unwrap();
        assert!(task.inner_grad(&star, &phi, Batch::Full).norm() < 1e-8);
    }

    #[test]
    fn singular_quadratic_is_reported() {
        let task = QuadraticTask::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let err = quadratic_closed_form_hypergradient(&task, &DVector::from_element(1, -1.0));
        assert!(matches!(err, Err(Error::IllConditioned { .. })));
    }
}
