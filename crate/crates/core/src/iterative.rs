//! Truncated conjugate gradient and Neumann-series baselines for
//! `(H + ρI)⁻¹ b`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{check_dim, HvpOracle};
use crate::meter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgConfig {
    /// Iteration cap `l`.
    pub max_iters: usize,
    /// Stop once `‖r‖ ≤ residual_tol·‖b‖`; zero runs all `l` iterations.
    #[serde(default)]
    pub residual_tol: f64,
}

impl CgConfig {
    pub fn new(max_iters: usize) -> Self {
        Self {
            max_iters,
            residual_tol: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("CG needs at least one iteration"));
        }
        if !(self.residual_tol >= 0.0) {
            return Err(Error::invalid("CG residual tolerance must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeumannConfig {
    /// Number of series terms beyond the first, `l`.
    pub truncation: usize,
    /// Step `α`; the series converges only when `‖I − αA‖ < 1`.
    pub alpha: f64,
}

impl NeumannConfig {
    pub fn new(truncation: usize, alpha: f64) -> Self {
        Self { truncation, alpha }
    }

    fn validate(&self) -> Result<()> {
        if self.truncation == 0 {
            return Err(Error::invalid("Neumann truncation must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("Neumann alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iters_used: usize,
    pub final_residual: f64,
}

fn apply_shifted(op: &dyn HvpOracle, rho: f64, v: &DVector<f64>) -> DVector<f64> {
    let mut out = op.apply(v);
    if rho != 0.0 {
        out.axpy(rho, v, 1.0);
    }
    out
}

fn validate_common(op: &dyn HvpOracle, rho: f64, b: &DVector<f64>) -> Result<()> {
    check_dim(b, op.dim(), "right-hand side")?;
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::invalid(format!("rho must be finite and nonnegative, got {rho}")));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("right-hand side has non-finite entries"));
    }
    Ok(())
}

/// Conjugate gradient on `(H + ρI)x = b` from `x₀ = 0`, at most `l` products.
pub fn cg_solve(op: &dyn HvpOracle, rho: f64, b: &DVector<f64>, cfg: &CgConfig) -> Result<CgOutcome> {
    validate_common(op, rho, b)?;
    cfg.validate()?;
    let p = b.len();
    let _ws = meter::charge_f64(4 * p);

    let stop = cfg.residual_tol * b.norm();
    let mut x = DVector::zeros(p);
    let mut r = b.clone();
    let mut dir = r.clone();
    let mut rr = r.dot(&r);
    let mut iters = 0;
    while iters < cfg.max_iters && rr.sqrt() > stop {
        let ad = apply_shifted(op, rho, &dir);
        let curvature = dir.dot(&ad);
        iters += 1;
        let step = rr / curvature;
        if !step.is_finite() || curvature <= 0.0 {
            return Err(Error::Divergence {
                step: iters,
                reason: format!("CG breakdown, direction curvature {curvature:e}"),
                last_finite: Some(x),
            });
        }
        let prev = x.clone();
        x.axpy(step, &dir, 1.0);
        r.axpy(-step, &ad, 1.0);
        let rr_next = r.dot(&r);
        if !rr_next.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: iters,
                reason: "CG produced non-finite iterate".into(),
                last_finite: Some(prev),
            });
        }
        dir *= rr_next / rr;
        dir += &r;
        rr = rr_next;
    }
    Ok(CgOutcome {
        x,
        iters_used: iters,
        final_residual: rr.sqrt(),
    })
}

/// A partial sum this many times larger than the bound for a convergent
/// series is treated as divergence.
const NEUMANN_BLOWUP: f64 = 1e10;

/// `α Σ_{i=0}^{l} (I − αA)^i b` with `A = H + ρI`, via `s ← b + (I − αA)s`.
///
/// Convergence of the series is the caller's concern; the only check is for
/// non-finite or exploding partial sums.
pub fn neumann_apply(op: &dyn HvpOracle, rho: f64, b: &DVector<f64>, cfg: &NeumannConfig) -> Result<DVector<f64>> {
    validate_common(op, rho, b)?;
    cfg.validate()?;
    let _ws = meter::charge_f64(3 * b.len());
    let b_norm = b.norm();
    let mut s = b.clone();
    for i in 1..=cfg.truncation {
        let as_ = apply_shifted(op, rho, &s);
        // s ← b + s − α A s
        s.axpy(-cfg.alpha, &as_, 1.0);
        s += b;
        let norm = s.norm();
        // a convergent series keeps ‖s_i‖ ≤ (i + 1)‖b‖
        if !norm.is_finite() || norm > NEUMANN_BLOWUP * (i as f64 + 1.0) * b_norm {
            return Err(Error::Divergence {
                step: i,
                reason: format!("Neumann partial sum norm {norm:e}; is ‖αA‖ > 1?"),
                last_finite: None,
            });
        }
    }
    Ok(s * cfg.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{dense_regularized_inverse_apply, CountingOracle, DenseOperator};
    use crate::rng;

    fn spd(p: usize, seed: u64) -> DenseOperator {
        let mut r = rng::seeded(seed);
        let mut m = rng::gram_psd(&mut r, p, p);
        for i in 0..p {
            m[(i, i)] += 0.5;
        }
        DenseOperator::new(m).unwrap()
    }

    #[test]
    fn cg_identity_one_step() {
        let op = DenseOperator::identity(4);
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let out = cg_solve(&op, 0.0, &b, &CgConfig::new(10)).unwrap();
        assert_eq!(out.iters_used, 1);
        assert_eq!(out.final_residual, 0.0);
        assert_eq!(out.x, b);
    }

    #[test]
    fn cg_exact_after_p_steps() {
        let op = spd(10, 1);
        let mut r = rng::seeded(99);
        let b = rng::normal_vector(&mut r, 10);
        let out = cg_solve(&op, 0.0, &b, &CgConfig::new(10)).unwrap();
        let want = op.matrix().clone().cholesky().unwrap().solve(&b);
        assert!((out.x - &want).norm() <= 1e-6 * want.norm());
    }

    #[test]
    fn cg_one_step_on_ill_conditioned() {
        let op = DenseOperator::from_diagonal(&[1.0, 1e6]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let out = cg_solve(&op, 0.0, &b, &CgConfig::new(1)).unwrap();
        assert!(out.final_residual > 0.0);
    }

    #[test]
    fn cg_indefinite_breaks_down() {
        let op = DenseOperator::from_diagonal(&[-1.0, -2.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let err = cg_solve(&op, 0.0, &b, &CgConfig::new(3)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn cg_early_stop() {
        let op = spd(30, 2);
        let mut r = rng::seeded(3);
        let b = rng::normal_vector(&mut r, 30);
        let cfg = CgConfig {
            max_iters: 200,
            residual_tol: 1e-8,
        };
        let out = cg_solve(&op, 0.1, &b, &cfg).unwrap();
        assert!(out.iters_used < 200);
        assert!(out.final_residual <= 1e-8 * b.norm());
        let want = dense_regularized_inverse_apply(&op, 0.1, &b).unwrap();
        assert!((out.x - &want).norm() <= 1e-6 * want.norm());
    }

    #[test]
    fn neumann_identity_alpha_one() {
        let op = DenseOperator::identity(3);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        for l in [1, 4, 17] {
            assert_eq!(neumann_apply(&op, 0.0, &b, &NeumannConfig::new(l, 1.0)).unwrap(), b);
        }
    }

    #[test]
    fn neumann_geometric_series() {
        let op = DenseOperator::from_diagonal(&[2.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let x = neumann_apply(&op, 0.0, &b, &NeumannConfig::new(30, 0.25)).unwrap();
        // 0.25 Σ_{i=0}^{30} 0.5^i = 0.5 (1 − 0.5³¹)
        let want = 0.5 * (1.0 - 0.5f64.powi(31));
        assert!((x[0] - want).abs() < 1e-15);
        assert!((x[0] - 0.5).abs() < 1e-6 && x[1] == 0.0);
    }

    #[test]
    fn neumann_blows_up() {
        let op = DenseOperator::from_diagonal(&[4.0]);
        let b = DVector::from_vec(vec![1.0]);
        assert!(neumann_apply(&op, 0.0, &b, &NeumannConfig::new(5, 1.0)).is_ok());
        let err = neumann_apply(&op, 0.0, &b, &NeumannConfig::new(50, 1.0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn product_counts() {
        let op = CountingOracle::new(spd(12, 4));
        let b = DVector::from_element(12, 1.0);
        cg_solve(&op, 0.0, &b, &CgConfig::new(7)).unwrap();
        assert!(op.calls() <= 8);
        let op = CountingOracle::new(spd(12, 4));
        neumann_apply(&op, 0.0, &b, &NeumannConfig::new(7, 0.001)).unwrap();
        assert_eq!(op.calls(), 7);
    }

    #[test]
    fn config_validation() {
        let op = DenseOperator::identity(2);
        let b = DVector::from_element(2, 1.0);
        assert!(cg_solve(&op, 0.0, &b, &CgConfig::new(0)).is_err());
        assert!(neumann_apply(&op, 0.0, &b, &NeumannConfig::new(0, 0.1)).is_err());
        assert!(neumann_apply(&op, 0.0, &b, &NeumannConfig::new(3, 0.0)).is_err());
        assert!(cg_solve(&op, -1.0, &b, &CgConfig::new(3)).is_err());
    }
}
