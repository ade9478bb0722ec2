//! Matrix-free hypergradients for bilevel optimization.
//!
//! The inverse-Hessian-vector product `(H + ρI)⁻¹ ∂g/∂θ` can be computed by a
//! Nyström low-rank approximation inverted through the Woodbury identity
//! ([`nystrom`]) or by truncated conjugate gradient and Neumann series
//! ([`iterative`]). [`hypergrad`] combines it with the mixed partial into the
//! hypergradient, and [`bilevel`] drives warm-start alternating optimization
//! over the synthetic problems in [`tasks`].

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilevel;
pub mod error;
pub mod hypergrad;
pub mod iterative;
pub mod linop;
pub mod meter;
pub mod nystrom;
pub mod rng;
pub mod tasks;

pub use bilevel::{
    compare_backends, run, Batch, BilevelProblem, OptimizerConfig, RunFailure, RunRecord, ScheduleConfig,
    WindowRecord,
};
pub use error::{Error, Result};
pub use hypergrad::{
    hypergradient, hypergradient_error, ihvp, CgBackend, DenseMixed, DerivativeBundle, DiagonalMixed, IhvpConfig,
    MixedPartial, NeumannBackend, NystromConfig, RunDiagnostics,
};
pub use iterative::{cg_solve, neumann_apply, CgConfig, CgOutcome, NeumannConfig};
pub use linop::{dense_regularized_inverse_apply, hvp_column, DenseOperator, HvpOracle};
pub use nystrom::{build_factors, inverse_apply, sample_indices, InversePlan, NystromFactors, SamplingKind, SamplingStrategy};
pub use tasks::{LogRegTask, LogRegTaskSpec, LowRankDemoSpec, QuadraticTask, QuadraticTaskSpec};
