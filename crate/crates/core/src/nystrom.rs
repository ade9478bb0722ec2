//! Nyström column-sampling approximation of a symmetric operator and the
//! Woodbury-based application of `(H_k + ρI)⁻¹`.
//!
//! `H_k = C · pinv(P) · Cᵀ` where `C = H[:, K]` holds `k` sampled columns
//! and `P = H[K, K]` is the pivot block. Writing `P = UΛUᵀ` and `L = CU`
//! gives `H_k = Σ l_i l_iᵀ / λ_i`, so `(H_k + ρI)⁻¹` is a low-rank
//! correction of `I/ρ`. Three plans compute it:
//!
//! * [`InversePlan::Full`] solves one `k×k` system (time-efficient).
//! * [`InversePlan::Rank1`] applies one rank-1 Woodbury update per column of `L`.
//! * [`InversePlan::Chunked`] applies rank-κ updates over κ-wide chunks of `L`.
//!
//! All three operate on the same retained eigen-subspace and agree to
//! roundoff. The streaming plans keep the running inverse as
//! `I/ρ − L S Lᵀ` with a `k×k` coefficient matrix `S`, so only one
//! `p×κ` chunk of `L` is live at a time.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{self, check_dim, DenseOperator, HvpOracle};
use crate::meter;
use crate::rng;

pub const DEFAULT_EIG_FLOOR: f64 = 1e-10;

/// How the index set `K` is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingKind {
    /// Uniform without replacement.
    #[default]
    Uniform,
    /// Without replacement, inclusion weight proportional to `H_ii²`.
    DiagonalSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingStrategy {
    #[serde(default)]
    pub kind: SamplingKind,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingStrategy {
    pub fn uniform(seed: u64) -> Self {
        Self {
            kind: SamplingKind::Uniform,
            seed,
        }
    }

    pub fn diagonal_squared(seed: u64) -> Self {
        Self {
            kind: SamplingKind::DiagonalSquared,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledIndices {
    /// Sorted, distinct indices in `[0, p)`.
    pub indices: Vec<usize>,
    /// Draws that had to fall back to uniform because no positive weight remained.
    pub fallback_draws: usize,
}

impl SampledIndices {
    /// Set when the weighted strategy found no positive weight at all.
    pub fn all_weights_zero(&self) -> bool {
        self.fallback_draws == self.indices.len() && self.fallback_draws > 0
    }
}

/// Draws `k` distinct column indices out of `p`.
///
/// `diag` must be supplied exactly when the strategy is
/// [`SamplingKind::DiagonalSquared`].
pub fn sample_indices(
    p: usize,
    k: usize,
    strategy: &SamplingStrategy,
    diag: Option<&DVector<f64>>,
) -> Result<SampledIndices> {
    if k == 0 || k > p {
        return Err(Error::invalid(format!("need 1 ≤ k ≤ p, got k = {k}, p = {p}")));
    }
    let mut rng = rng::seeded(strategy.seed);
    match strategy.kind {
        SamplingKind::Uniform => {
            if diag.is_some() {
                return Err(Error::invalid("uniform sampling takes no diagonal"));
            }
            let mut indices = rand::seq::index::sample(&mut rng, p, k).into_vec();
            indices.sort_unstable();
            Ok(SampledIndices {
                indices,
                fallback_draws: 0,
            })
        }
        SamplingKind::DiagonalSquared => {
            let diag = diag.ok_or_else(|| Error::invalid("diagonal-squared sampling needs the diagonal"))?;
            check_dim(diag, p, "diagonal")?;
            if diag.iter().any(|d| !d.is_finite()) {
                return Err(Error::invalid("diagonal has non-finite entries"));
            }
            let mut weights: Vec<f64> = diag.iter().map(|d| d * d).collect();
            let mut taken = vec![false; p];
            let mut indices = Vec::with_capacity(k);
            let mut fallback_draws = 0;
            for _ in 0..k {
                let total: f64 = weights.iter().sum();
                let pick = if total > 0.0 {
                    let target = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut chosen = None;
                    for (i, w) in weights.iter().enumerate() {
                        if *w > 0.0 {
                            acc += w;
                            chosen = Some(i);
                            if acc > target {
                                break;
                            }
                        }
                    }
                    chosen.expect("positive total implies a positive weight")
                } else {
                    fallback_draws += 1;
                    let free: Vec<usize> = (0..p).filter(|&i| !taken[i]).collect();
                    free[rng.random_range(0..free.len())]
                };
                taken[pick] = true;
                weights[pick] = 0.0;
                indices.push(pick);
            }
            indices.sort_unstable();
            Ok(SampledIndices {
                indices,
                fallback_draws,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorOptions {
    /// Pivot eigenvalues with `|λ| < eig_floor · max|λ|` are dropped.
    pub eig_floor: f64,
    /// Accept a pivot whose eigenvalues are all dropped (then `H_k = 0`).
    pub allow_degenerate: bool,
}

impl Default for FactorOptions {
    fn default() -> Self {
        Self {
            eig_floor: DEFAULT_EIG_FLOOR,
            allow_degenerate: false,
        }
    }
}

/// Sampled columns plus the eigendecomposition of their pivot block.
#[derive(Debug, Clone, PartialEq)]
pub struct NystromFactors {
    indices: Vec<usize>,
    columns: DMatrix<f64>,
    pivot_eigvecs: DMatrix<f64>,
    pivot_eigvals: DVector<f64>,
    retained: Vec<usize>,
    rho: f64,
}

/// Extracts `H[:, K]` with `k` products and eigendecomposes the pivot block.
pub fn build_factors(
    op: &dyn HvpOracle,
    indices: &[usize],
    rho: f64,
    opts: &FactorOptions,
) -> Result<NystromFactors> {
    let p = op.dim();
    let k = indices.len();
    if k == 0 || k > p {
        return Err(Error::invalid(format!("need 1 ≤ |K| ≤ p, got |K| = {k}, p = {p}")));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("rho must be positive and finite, got {rho}")));
    }
    if !(opts.eig_floor >= 0.0) {
        return Err(Error::invalid("eig_floor must be nonnegative"));
    }
    let mut seen = vec![false; p];
    for &i in indices {
        if i >= p {
            return Err(Error::invalid(format!("index {i} out of range for dimension {p}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("index {i} appears twice")));
        }
    }

    let mut selector = DMatrix::zeros(p, k);
    for (j, &i) in indices.iter().enumerate() {
        selector[(i, j)] = 1.0;
    }
    let columns = op.apply_block(&selector);
    if columns.shape() != (p, k) {
        return Err(Error::invalid(format!(
            "oracle returned a {:?} block, expected {:?}",
            columns.shape(),
            (p, k)
        )));
    }
    if columns.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("oracle returned non-finite columns".into()));
    }

    let mut pivot = columns.select_rows(indices);
    rng::symmetrize(&mut pivot);
    let eig = pivot
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("pivot eigendecomposition did not converge".into()))?;

    // descending eigenvalue order keeps the stream order deterministic
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pivot_eigvals = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
    let pivot_eigvecs = eig.eigenvectors.select_columns(&order);

    let max_abs = pivot_eigvals.amax();
    let retained: Vec<usize> = (0..k)
        .filter(|&i| {
            let lam = pivot_eigvals[i].abs();
            max_abs > 0.0 && lam > 0.0 && lam >= opts.eig_floor * max_abs
        })
        .collect();
    if retained.is_empty() && !opts.allow_degenerate {
        return Err(Error::DegeneratePivot { k });
    }

    Ok(NystromFactors {
        indices: indices.to_vec(),
        columns,
        pivot_eigvecs,
        pivot_eigvals,
        retained,
        rho,
    })
}

impl NystromFactors {
    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `C = H[:, K]`.
    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    /// `U`, ordered by descending eigenvalue.
    pub fn pivot_eigvecs(&self) -> &DMatrix<f64> {
        &self.pivot_eigvecs
    }

    /// `Λ`, descending.
    pub fn pivot_eigvals(&self) -> &DVector<f64> {
        &self.pivot_eigvals
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Positions (into `Λ`) of the eigenpairs kept in the pseudo-inverse.
    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn dropped_count(&self) -> usize {
        self.rank() - self.retained.len()
    }

    /// Retained eigenvalues that are negative (indefinite pivot).
    pub fn negative_count(&self) -> usize {
        self.retained
            .iter()
            .filter(|&&i| self.pivot_eigvals[i] < 0.0)
            .count()
    }

    /// Same factors under a different regularizer.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be positive and finite, got {rho}")));
        }
        Ok(Self { rho, ..self.clone() })
    }

    fn retained_eigvecs(&self) -> DMatrix<f64> {
        self.pivot_eigvecs.select_columns(&self.retained)
    }

    fn retained_eigvals(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.retained.len(),
            self.retained.iter().map(|&i| self.pivot_eigvals[i]),
        )
    }

    /// Dense `H_k = L Λ⁻¹ Lᵀ` over the retained subspace.
    pub fn reconstruct(&self) -> Result<DMatrix<f64>> {
        let p = self.dim();
        if p > linop::DEFAULT_DENSE_CAP {
            return Err(Error::Capability {
                dim: p,
                cap: linop::DEFAULT_DENSE_CAP,
            });
        }
        let lifted = &self.columns * self.retained_eigvecs();
        let mut scaled = lifted.clone();
        for (j, lam) in self.retained_eigvals().iter().enumerate() {
            scaled.column_mut(j).unscale_mut(*lam);
        }
        let mut hk = scaled * lifted.transpose();
        rng::symmetrize(&mut hk);
        Ok(hk)
    }
}

/// Which Woodbury schedule [`inverse_apply`] follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InversePlan {
    /// One `k×k` solve (κ = k).
    #[default]
    Full,
    /// Rank-1 updates (κ = 1).
    Rank1,
    /// Rank-κ updates over κ-wide chunks.
    Chunked { kappa: usize },
}

impl InversePlan {
    /// The chunk width κ this plan uses for a rank-`k` approximation.
    pub fn kappa(&self, k: usize) -> Result<usize> {
        match *self {
            InversePlan::Full => Ok(k),
            InversePlan::Rank1 => Ok(1),
            InversePlan::Chunked { kappa } if (1..=k).contains(&kappa) => Ok(kappa),
            InversePlan::Chunked { kappa } => Err(Error::invalid(format!(
                "chunk width κ = {kappa} must lie in [1, {k}]"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            InversePlan::Full => "full".into(),
            InversePlan::Rank1 => "rank1".into(),
            InversePlan::Chunked { kappa } => format!("chunked{kappa}"),
        }
    }
}

/// Computes `(H_k + ρI)⁻¹ b` without forming any `p×p` array.
pub fn inverse_apply(factors: &NystromFactors, plan: InversePlan, b: &DVector<f64>) -> Result<DVector<f64>> {
    let p = factors.dim();
    check_dim(b, p, "right-hand side")?;
    let kappa = plan.kappa(factors.rank())?;
    let rho = factors.rho;
    let _out = meter::charge_f64(p);
    if factors.retained.is_empty() {
        return Ok(b / rho);
    }
    let x = match plan {
        InversePlan::Full => apply_full(factors, b)?,
        InversePlan::Rank1 | InversePlan::Chunked { .. } => apply_streamed(factors, kappa, b)?,
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::ill_conditioned("Woodbury update produced non-finite values"));
    }
    Ok(x)
}

/// `b/ρ − (1/ρ²) L (Λ + LᵀL/ρ)⁻¹ Lᵀ b`.
fn apply_full(f: &NystromFactors, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (p, r, rho) = (f.dim(), f.retained.len(), f.rho);
    let _ws = meter::charge_f64(p * r + r * r + 2 * r);
    let lifted = &f.columns * f.retained_eigvecs();
    let mut inner = lifted.tr_mul(&lifted) / rho;
    for (j, lam) in f.retained_eigvals().iter().enumerate() {
        inner[(j, j)] += lam;
    }
    let rhs = lifted.tr_mul(b);
    let y = solve_inner(&inner, &rhs, "full k×k system")?;
    Ok(b / rho - (lifted * y) / (rho * rho))
}

/// Streams Woodbury updates over κ-wide chunks of `L`, keeping the running
/// inverse as `I/ρ − L_done S L_doneᵀ`.
fn apply_streamed(f: &NystromFactors, kappa: usize, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (p, k, r, rho) = (f.dim(), f.rank(), f.retained.len(), f.rho);
    let u = f.retained_eigvecs();
    let lam = f.retained_eigvals();

    let _coeffs = meter::charge_f64(r * r);
    let mut s = DMatrix::<f64>::zeros(r, r);
    let mut done = 0;
    for (chunk, start) in (0..r).step_by(kappa).enumerate() {
        let m = kappa.min(r - start);
        let _chunk = meter::charge_f64(p * m + k * m + (start + m) * m * 3 + m * m);

        let l_chunk = &f.columns * u.columns(start, m);
        let c_t_l = f.columns.tr_mul(&l_chunk);
        let grams = u.columns(0, start + m).tr_mul(&c_t_l);
        let cross = grams.rows(0, done);
        let gram_chunk = grams.rows(done, m);

        // Ĥ L_chunk = L_all · a, with a = [−S·cross ; I/ρ]
        let s_cross = s.view((0, 0), (done, done)) * cross;
        let mut inner = gram_chunk / rho - cross.tr_mul(&s_cross);
        for j in 0..m {
            inner[(j, j)] += lam[start + j];
        }
        let mut a = DMatrix::<f64>::zeros(done + m, m);
        a.rows_mut(0, done).copy_from(&(-&s_cross));
        for j in 0..m {
            a[(done + j, j)] = 1.0 / rho;
        }
        let z = solve_inner_block(&inner, &a.transpose(), chunk)?;
        let update = &a * z;
        let mut block = s.view_mut((0, 0), (done + m, done + m));
        block += update;
        done += m;
    }

    let _tmp = meter::charge_f64(2 * k + 2 * r);
    let proj = u.tr_mul(&f.columns.tr_mul(b));
    let coeff = &u * (&s * proj);
    Ok(b / rho - &f.columns * coeff)
}

fn solve_inner(inner: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let y = inner
        .clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::ill_conditioned(format!("{what} is singular")))?;
    let res = (inner * &y - rhs).norm();
    if !res.is_finite() || res > 1e-6 * rhs.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::ill_conditioned(format!("{what}: inner residual {res:e}")));
    }
    Ok(y)
}

fn solve_inner_block(inner: &DMatrix<f64>, rhs: &DMatrix<f64>, chunk: usize) -> Result<DMatrix<f64>> {
    let z = inner
        .clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::ill_conditioned(format!("chunk {chunk}: inner system is singular")))?;
    let res = (inner * &z - rhs).norm();
    if !res.is_finite() || res > 1e-6 * rhs.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::ill_conditioned(format!("chunk {chunk}: inner residual {res:e}")));
    }
    Ok(z)
}

/// `‖H − H_k‖_op` against a dense copy of `H`.
pub fn nystrom_error_opnorm(dense_h: &DenseOperator, factors: &NystromFactors) -> Result<f64> {
    if dense_h.dim() != factors.dim() {
        return Err(Error::invalid(format!(
            "dense operator has dimension {}, factors have {}",
            dense_h.dim(),
            factors.dim()
        )));
    }
    let diff = dense_h.matrix() - factors.reconstruct()?;
    Ok(linop::symmetric_eigenvalues(&diff)?.amax())
}

/// Upper bound on the hypergradient error: `‖g‖·‖F‖·(1/ρ)·e/(ρ + e)`.
pub fn hypergradient_error_bound(g_norm: f64, f_opnorm: f64, rho: f64, err_opnorm: f64) -> Result<f64> {
    for (name, v) in [("g_norm", g_norm), ("f_opnorm", f_opnorm), ("err_opnorm", err_opnorm)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
        }
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    Ok(g_norm * f_opnorm * (err_opnorm / (rho + err_opnorm)) / rho)
}
