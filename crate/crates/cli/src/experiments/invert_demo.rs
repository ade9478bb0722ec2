//! Dense inverses of `A + ρI` from Nyström and Neumann approximations.

use hypergrad::linop::{self, DenseOperator, HvpOracle};
use hypergrad::nystrom::{build_factors, inverse_apply, sample_indices, FactorOptions, InversePlan, SamplingKind, SamplingStrategy};
use hypergrad::rng;
use hypergrad::tasks::{make_lowrank_demo, LowRankDemoSpec};
use hypergrad::{neumann_apply, NeumannConfig};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::Written;
use crate::config::InvertDemoConfig;
use crate::error::CliResult;
use crate::output::{fmt_f64, write_json, Table};
use crate::plots;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Nystrom,
    Neumann,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvertRow {
    pub seed: u64,
    pub method: Method,
    /// `k` for Nyström, `l` for Neumann.
    pub size: usize,
    pub alpha: Option<f64>,
    /// `‖(A + ρI)⁻¹ − approx‖_F`; infinite when the series diverged.
    pub frobenius_error: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvertDemoReport {
    pub rows: Vec<InvertRow>,
}

impl InvertDemoReport {
    pub fn error(&self, seed: u64, method: Method, size: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.method == method && r.size == size)
            .map(|r| r.frobenius_error)
    }
}

/// Applies `solve` to every basis vector.
fn materialize<F: FnMut(&DVector<f64>) -> hypergrad::Result<DVector<f64>>>(p: usize, mut solve: F) -> hypergrad::Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        out.set_column(j, &solve(&e)?);
    }
    Ok(out)
}

pub fn nystrom_inverse(h: &DenseOperator, k: usize, rho: f64, sampling: SamplingKind, seed: u64) -> hypergrad::Result<DMatrix<f64>> {
    let strategy = SamplingStrategy { kind: sampling, seed };
    let diag = match sampling {
        SamplingKind::Uniform => None,
        SamplingKind::DiagonalSquared => h.diagonal(),
    };
    let idx = sample_indices(h.dim(), k, &strategy, diag.as_ref())?;
    let factors = build_factors(h, &idx.indices, rho, &FactorOptions::default())?;
    materialize(h.dim(), |e| inverse_apply(&factors, InversePlan::Full, e))
}

pub fn neumann_inverse(h: &DenseOperator, l: usize, alpha: f64, rho: f64) -> hypergrad::Result<DMatrix<f64>> {
    let cfg = NeumannConfig::new(l, alpha);
    materialize(h.dim(), |e| neumann_apply(h, rho, e, &cfg))
}

fn sampling_seed(seed: u64, k: usize) -> u64 {
    rng::derive_seed(seed, k as u64)
}

/// The instance, exact inverse and the approximations of the first Nyström
/// and Neumann sizes, for plotting.
struct Panels {
    exact: DMatrix<f64>,
    nystrom: Option<(usize, DMatrix<f64>)>,
    neumann: Option<(usize, DMatrix<f64>)>,
}

fn compute_seed(cfg: &InvertDemoConfig, seed: u64, rows: &mut Vec<InvertRow>) -> CliResult<Panels> {
    let spec = LowRankDemoSpec {
        p: cfg.p,
        rank: cfg.rank,
        rho: cfg.rho,
        seed,
    };
    let h = make_lowrank_demo(&spec)?;
    let exact = linop::dense_regularized_inverse(&h, cfg.rho)?;
    let exact_norm = exact.norm();
    let mut panels = Panels {
        exact: exact.clone(),
        nystrom: None,
        neumann: None,
    };
    for &k in &cfg.nystrom_ranks {
        let approx = nystrom_inverse(&h, k, cfg.rho, cfg.sampling, sampling_seed(seed, k))?;
        let err = (&exact - &approx).norm();
        rows.push(InvertRow {
            seed,
            method: Method::Nystrom,
            size: k,
            alpha: None,
            frobenius_error: err,
            relative_error: err / exact_norm,
        });
        panels.nystrom.get_or_insert((k, approx));
    }
    for &l in &cfg.neumann_terms {
        let (err, approx) = match neumann_inverse(&h, l, cfg.neumann_alpha, cfg.rho) {
            Ok(approx) => ((&exact - &approx).norm(), Some(approx)),
            Err(e) if e.is_numerical() => (f64::INFINITY, None),
            Err(e) => return Err(e.into()),
        };
        rows.push(InvertRow {
            seed,
            method: Method::Neumann,
            size: l,
            alpha: Some(cfg.neumann_alpha),
            frobenius_error: err,
            relative_error: err / exact_norm,
        });
        if let (None, Some(a)) = (&panels.neumann, approx) {
            panels.neumann = Some((l, a));
        }
    }
    Ok(panels)
}

pub fn compute(cfg: &InvertDemoConfig) -> CliResult<InvertDemoReport> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        compute_seed(cfg, seed, &mut rows)?;
    }
    Ok(InvertDemoReport { rows })
}

pub fn run(cfg: &InvertDemoConfig, plots: bool) -> CliResult<Written> {
    let mut written = Written::default();
    let dir = cfg.output_dir.as_path();
    let mut rows = Vec::new();
    let mut first = None;
    for &seed in &cfg.seeds {
        let panels = compute_seed(cfg, seed, &mut rows)?;
        first.get_or_insert(panels);
    }
    let report = InvertDemoReport { rows };

    let mut table = Table::new(&["seed", "method", "size", "alpha", "rho", "frobenius_error", "relative_error"]);
    for r in &report.rows {
        table.push(vec![
            r.seed.to_string(),
            match r.method {
                Method::Nystrom => "nystrom".into(),
                Method::Neumann => "neumann".into(),
            },
            r.size.to_string(),
            r.alpha.map(fmt_f64).unwrap_or_default(),
            fmt_f64(cfg.rho),
            fmt_f64(r.frobenius_error),
            fmt_f64(r.relative_error),
        ]);
    }
    table.write(&written.add(dir, "invert_errors.csv"))?;
    write_json(&written.add(dir, "invert_summary.json"), &report)?;

    if plots {
        if let Some(p) = first {
            let mut panels = vec![("exact".to_string(), p.exact)];
            if let Some((k, m)) = p.nystrom {
                panels.push((format!("Nyström k={k}"), m));
            }
            if let Some((l, m)) = p.neumann {
                panels.push((format!("Neumann l={l}"), m));
            }
            let title = format!("(A + {}I)⁻¹, seed {}", cfg.rho, cfg.seeds[0]);
            plots::heatmaps(&written.add(dir, "inverses.svg"), &title, &panels)?;
        }
    }
    Ok(written)
}
