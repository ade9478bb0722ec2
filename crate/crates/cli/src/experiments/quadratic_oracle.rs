//! Pipeline hypergradients on quadratic bilevel tasks against the closed form.

use hypergrad::rng;
use hypergrad::tasks::quadratic_closed_form_hypergradient;
use hypergrad::{hypergradient, Batch, BilevelProblem, QuadraticTask, QuadraticTaskSpec};
use nalgebra::DVector;
use serde::Serialize;

use super::Written;
use crate::config::QuadraticOracleConfig;
use crate::error::{CliError, CliResult};
use crate::output::{fmt_f64, write_json, Table};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub seed: u64,
    pub backend: String,
    pub relative_error: f64,
    pub closed_form_norm: f64,
    pub inner_grad_norm: f64,
    pub oracle_calls: usize,
}

/// `φ ∈ (0.5, 1.5)^p`, drawn per seed.
pub fn outer_point(p: usize, seed: u64) -> DVector<f64> {
    let mut r = rng::seeded(rng::derive_seed(seed, 0xF1));
    rng::normal_vector(&mut r, p).map(|z| 1.0 + 0.5 * z.tanh())
}

/// Inner optimum by a dense solve, polished with Newton steps until the
/// gradient norm reaches `1e-10` or stops improving.
pub fn solve_inner(task: &QuadraticTask, phi: &DVector<f64>) -> CliResult<DVector<f64>> {
    let mut theta = task.inner_optimum(phi)?;
    let lu = task.dense_hessian(phi)?.into_matrix().lu();
    for _ in 0..5 {
        let g = task.inner_grad(&theta, phi, Batch::Full);
        if g.norm() <= 1e-10 {
            break;
        }
        let step = lu
            .solve(&g)
            .ok_or_else(|| CliError::Numerical("inner Hessian is singular".into()))?;
        theta -= step;
    }
    Ok(theta)
}

pub fn compute(cfg: &QuadraticOracleConfig) -> CliResult<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let task = QuadraticTask::random(&QuadraticTaskSpec { p: cfg.p, seed })?;
        let phi = outer_point(cfg.p, seed);
        let theta = solve_inner(&task, &phi)?;
        let inner_grad_norm = task.inner_grad(&theta, &phi, Batch::Full).norm();
        let want = quadratic_closed_form_hypergradient(&task, &phi)?;
        for (i, ihvp) in cfg.ihvp.iter().enumerate() {
            let bundle = task.bundle_at(&theta, &phi)?;
            let ihvp = ihvp.reseeded(rng::derive_seed(seed, i as u64));
            let (h, diag) = hypergradient(&bundle, &ihvp)?;
            rows.push(OracleRow {
                seed,
                backend: ihvp.label(),
                relative_error: (&h - &want).norm() / want.norm().max(f64::MIN_POSITIVE),
                closed_form_norm: want.norm(),
                inner_grad_norm,
                oracle_calls: diag.oracle_calls,
            });
        }
    }
    Ok(rows)
}

pub fn run(cfg: &QuadraticOracleConfig) -> CliResult<Written> {
    let rows = compute(cfg)?;
    let mut written = Written::default();
    let dir = cfg.output_dir.as_path();
    let mut t = Table::new(&["seed", "backend", "relative_error", "closed_form_norm", "inner_grad_norm", "oracle_calls"]);
    for r in &rows {
        t.push(vec![
            r.seed.to_string(),
            r.backend.clone(),
            fmt_f64(r.relative_error),
            fmt_f64(r.closed_form_norm),
            fmt_f64(r.inner_grad_norm),
            r.oracle_calls.to_string(),
        ]);
    }
    t.write(&written.add(dir, "oracle.csv"))?;
    write_json(&written.add(dir, "oracle_summary.json"), &rows)?;
    if let Some(tol) = cfg.tolerance {
        let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
        if !(worst <= tol) {
            return Err(CliError::Numerical(format!(
                "largest relative error {worst:e} exceeds tolerance {tol:e}"
            )));
        }
    }
    Ok(written)
}
