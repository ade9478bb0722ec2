//! Implicit-differentiation hypergradients.
//!
//! With `g = ∂g/∂θ`, `H = ∂²f/∂θ²` and `F = ∂²f/∂φ∂θ` (a `p×h` block),
//!
//! ```text
//! dg/dφ ≈ ∂g/∂φ − Fᵀ (H + ρI)⁻¹ g
//! ```
//!
//! The inverse is applied to the `p`-vector `g` first; `F` is only ever
//! touched through its transpose-apply.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iterative::{cg_solve, neumann_apply, CgConfig, NeumannConfig};
use crate::linop::{self, check_dim, CountingOracle, DenseOperator, HvpOracle};
use crate::meter;
use crate::nystrom::{
    self, build_factors, inverse_apply, sample_indices, FactorOptions, InversePlan, NystromFactors,
    SamplingKind, SamplingStrategy,
};

/// Transpose-apply of the mixed partial block `F = ∂²f/∂φ∂θ ∈ R^{p×h}`.
pub trait MixedPartial: Send + Sync {
    /// `p`
    fn inner_dim(&self) -> usize;
    /// `h`
    fn outer_dim(&self) -> usize;
    /// `Fᵀ v`
    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64>;
}

/// `F = diag(scale)`, so `Fᵀ v = scale ⊙ v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMixed {
    scale: DVector<f64>,
}

impl DiagonalMixed {
    pub fn new(scale: DVector<f64>) -> Self {
        Self { scale }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.scale)
    }
}

impl MixedPartial for DiagonalMixed {
    fn inner_dim(&self) -> usize {
        self.scale.len()
    }

    fn outer_dim(&self) -> usize {
        self.scale.len()
    }

    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        self.scale.component_mul(v)
    }
}

/// Explicit `p×h` mixed block.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMixed {
    block: DMatrix<f64>,
}

impl DenseMixed {
    pub fn new(block: DMatrix<f64>) -> Self {
        Self { block }
    }

    pub fn block(&self) -> &DMatrix<f64> {
        &self.block
    }
}

impl MixedPartial for DenseMixed {
    fn inner_dim(&self) -> usize {
        self.block.nrows()
    }

    fn outer_dim(&self) -> usize {
        self.block.ncols()
    }

    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        self.block.tr_mul(v)
    }
}

/// Everything the hypergradient needs at one `(θ, φ)`.
pub struct DerivativeBundle {
    pub grad_outer_theta: DVector<f64>,
    pub grad_outer_phi: DVector<f64>,
    pub hvp: Box<dyn HvpOracle>,
    pub mixed: Box<dyn MixedPartial>,
}

impl DerivativeBundle {
    pub fn new(
        grad_outer_theta: DVector<f64>,
        grad_outer_phi: DVector<f64>,
        hvp: Box<dyn HvpOracle>,
        mixed: Box<dyn MixedPartial>,
    ) -> Result<Self> {
        let p = hvp.dim();
        check_dim(&grad_outer_theta, p, "∂g/∂θ")?;
        if mixed.inner_dim() != p {
            return Err(Error::invalid(format!(
                "mixed partial has {} rows, Hessian has dimension {p}",
                mixed.inner_dim()
            )));
        }
        check_dim(&grad_outer_phi, mixed.outer_dim(), "∂g/∂φ")?;
        Ok(Self {
            grad_outer_theta,
            grad_outer_phi,
            hvp,
            mixed,
        })
    }

    pub fn inner_dim(&self) -> usize {
        self.hvp.dim()
    }

    pub fn outer_dim(&self) -> usize {
        self.mixed.outer_dim()
    }
}

fn default_eig_floor() -> f64 {
    nystrom::DEFAULT_EIG_FLOOR
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NystromConfig {
    /// Number of sampled columns `k`.
    pub rank: usize,
    #[serde(default)]
    pub plan: InversePlan,
    pub rho: f64,
    #[serde(default)]
    pub sampling: SamplingStrategy,
    #[serde(default = "default_eig_floor")]
    pub eig_floor: f64,
}

impl NystromConfig {
    pub fn new(rank: usize, rho: f64) -> Self {
        Self {
            rank,
            plan: InversePlan::Full,
            rho,
            sampling: SamplingStrategy::default(),
            eig_floor: nystrom::DEFAULT_EIG_FLOOR,
        }
    }

    pub fn with_plan(self, plan: InversePlan) -> Self {
        Self { plan, ..self }
    }

    pub fn with_sampling(self, sampling: SamplingStrategy) -> Self {
        Self { sampling, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgBackend {
    pub max_iters: usize,
    #[serde(default)]
    pub residual_tol: f64,
    pub rho: f64,
}

impl CgBackend {
    pub fn new(max_iters: usize, rho: f64) -> Self {
        Self {
            max_iters,
            residual_tol: 0.0,
            rho,
        }
    }

    pub fn solver(&self) -> CgConfig {
        CgConfig {
            max_iters: self.max_iters,
            residual_tol: self.residual_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeumannBackend {
    pub truncation: usize,
    pub alpha: f64,
    pub rho: f64,
}

impl NeumannBackend {
    pub fn new(truncation: usize, alpha: f64, rho: f64) -> Self {
        Self { truncation, alpha, rho }
    }

    pub fn solver(&self) -> NeumannConfig {
        NeumannConfig {
            truncation: self.truncation,
            alpha: self.alpha,
        }
    }
}

/// Which inverse-Hessian-vector-product backend to use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum IhvpConfig {
    Nystrom(NystromConfig),
    Cg(CgBackend),
    Neumann(NeumannBackend),
}

impl IhvpConfig {
    pub fn tag(&self) -> &'static str {
        match self {
            IhvpConfig::Nystrom(_) => "nystrom",
            IhvpConfig::Cg(_) => "cg",
            IhvpConfig::Neumann(_) => "neumann",
        }
    }

    pub fn rho(&self) -> f64 {
        match self {
            IhvpConfig::Nystrom(c) => c.rho,
            IhvpConfig::Cg(c) => c.rho,
            IhvpConfig::Neumann(c) => c.rho,
        }
    }

    /// Short human-readable identifier, stable across runs.
    pub fn label(&self) -> String {
        match self {
            IhvpConfig::Nystrom(c) => {
                let mut s = format!("nystrom(k={},rho={}", c.rank, c.rho);
                if c.plan != InversePlan::Full {
                    s.push_str(&format!(",{}", c.plan.label()));
                }
                if c.sampling.kind == SamplingKind::DiagonalSquared {
                    s.push_str(",diag2");
                }
                s + ")"
            }
            IhvpConfig::Cg(c) => format!("cg(l={},rho={})", c.max_iters, c.rho),
            IhvpConfig::Neumann(c) => format!("neumann(l={},alpha={},rho={})", c.truncation, c.alpha, c.rho),
        }
    }

    /// Same backend with the Nyström sampling seed replaced; baselines are unchanged.
    pub fn reseeded(&self, seed: u64) -> Self {
        match *self {
            IhvpConfig::Nystrom(c) => IhvpConfig::Nystrom(NystromConfig {
                sampling: c.sampling.with_seed(seed),
                ..c
            }),
            other => other,
        }
    }
}

/// Backend-specific detail attached to every hypergradient.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunDiagnostics {
    pub backend: String,
    /// Hessian-vector products consumed (block products count per column).
    pub oracle_calls: usize,
    pub wall: Duration,
    /// Peak bytes charged by the solver kernel, excluding stored factors.
    pub workspace_bytes: usize,
    /// Bytes held by the Nyström factors (sampled columns and pivot eigensystem).
    pub factor_bytes: usize,
    pub cg_iters: Option<usize>,
    pub cg_residual: Option<f64>,
    pub dropped_eigs: Option<usize>,
    pub negative_eigs: Option<usize>,
    pub sampling_fallback_draws: Option<usize>,
}

/// Samples, factors and applies `(H_k + ρI)⁻¹ b`, returning the factors too.
pub fn nystrom_ihvp(
    op: &dyn HvpOracle,
    cfg: &NystromConfig,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, NystromFactors, usize)> {
    let p = op.dim();
    let diag = match cfg.sampling.kind {
        SamplingKind::Uniform => None,
        SamplingKind::DiagonalSquared => Some(op.diagonal().ok_or_else(|| {
            Error::invalid("diagonal-squared sampling needs an oracle that exposes its diagonal")
        })?),
    };
    let sampled = sample_indices(p, cfg.rank, &cfg.sampling, diag.as_ref())?;
    let opts = FactorOptions {
        eig_floor: cfg.eig_floor,
        allow_degenerate: false,
    };
    let factors = build_factors(op, &sampled.indices, cfg.rho, &opts)?;
    let x = inverse_apply(&factors, cfg.plan, b)?;
    Ok((x, factors, sampled.fallback_draws))
}

fn factor_bytes(f: &NystromFactors) -> usize {
    let k = f.rank();
    (f.dim() * k + k * k + 2 * k) * std::mem::size_of::<f64>()
}

/// `(H + ρI)⁻¹ b` through the configured backend, filling `diag` on the way.
pub fn ihvp(op: &dyn HvpOracle, cfg: &IhvpConfig, b: &DVector<f64>, diag: &mut RunDiagnostics) -> Result<DVector<f64>> {
    match cfg {
        IhvpConfig::Nystrom(c) => {
            let (x, factors, fallback) = nystrom_ihvp(op, c, b)?;
            diag.dropped_eigs = Some(factors.dropped_count());
            diag.negative_eigs = Some(factors.negative_count());
            diag.sampling_fallback_draws = Some(fallback);
            diag.factor_bytes = factor_bytes(&factors);
            Ok(x)
        }
        IhvpConfig::Cg(c) => {
            let out = cg_solve(op, c.rho, b, &c.solver())?;
            diag.cg_iters = Some(out.iters_used);
            diag.cg_residual = Some(out.final_residual);
            Ok(out.x)
        }
        IhvpConfig::Neumann(c) => neumann_apply(op, c.rho, b, &c.solver()),
    }
}

/// `∂g/∂φ − Fᵀ (H + ρI)⁻¹ ∂g/∂θ` with the inverse taken by `cfg`.
pub fn hypergradient(bundle: &DerivativeBundle, cfg: &IhvpConfig) -> Result<(DVector<f64>, RunDiagnostics)> {
    let start = Instant::now();
    let mut diag = RunDiagnostics {
        backend: cfg.label(),
        ..Default::default()
    };
    let counting = CountingOracle::new(&*bundle.hvp);
    let (solved, workspace) = meter::measure(|| ihvp(&counting, cfg, &bundle.grad_outer_theta, &mut diag));
    let v = solved.map_err(|e| Error::Backend {
        backend: cfg.tag(),
        source: Box::new(e),
    })?;
    let h = &bundle.grad_outer_phi - bundle.mixed.apply_transpose(&v);
    diag.oracle_calls = counting.calls();
    diag.workspace_bytes = workspace;
    diag.wall = start.elapsed();
    Ok((h, diag))
}

/// Measured hypergradient error against the dense reference, with its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradError {
    /// `‖h★ − h‖₂`
    pub err: f64,
    pub bound: f64,
    /// `‖H − H_k‖_op`
    pub err_opnorm: f64,
    pub h_star: DVector<f64>,
    pub h: DVector<f64>,
}

/// Compares the Nyström hypergradient with the one from a dense
/// `(H + ρI)⁻¹`, reusing the same sampled columns for the bound.
pub fn hypergradient_error(
    bundle: &DerivativeBundle,
    dense_h: &DenseOperator,
    dense_mixed: &DMatrix<f64>,
    cfg: &NystromConfig,
) -> Result<HypergradError> {
    let p = bundle.inner_dim();
    if dense_h.dim() != p || dense_mixed.nrows() != p || dense_mixed.ncols() != bundle.outer_dim() {
        return Err(Error::invalid("dense references do not match the bundle dimensions"));
    }
    let g = &bundle.grad_outer_theta;
    let exact = linop::dense_regularized_inverse_apply(dense_h, cfg.rho, g)?;
    let h_star = &bundle.grad_outer_phi - dense_mixed.tr_mul(&exact);

    let (approx, factors, _) = nystrom_ihvp(&*bundle.hvp, cfg, g)?;
    let h = &bundle.grad_outer_phi - bundle.mixed.apply_transpose(&approx);

    let err_opnorm = nystrom::nystrom_error_opnorm(dense_h, &factors)?;
    let f_opnorm = linop::operator_norm_rect(dense_mixed)?;
    let bound = nystrom::hypergradient_error_bound(g.norm(), f_opnorm, cfg.rho, err_opnorm)?;
    Ok(HypergradError {
        err: (&h_star - &h).norm(),
        bound,
        err_opnorm,
        h_star,
        h,
    })
}
