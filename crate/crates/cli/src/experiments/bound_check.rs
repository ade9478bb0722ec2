//! Measured Nyström hypergradient error against its upper bound.

use hypergrad::hypergrad::hypergradient_error;
use hypergrad::nystrom::SamplingStrategy;
use hypergrad::rng;
use hypergrad::{DenseMixed, DenseOperator, DerivativeBundle, HvpOracle, NystromConfig};
use rand::Rng;
use serde::Serialize;

use super::Written;
use crate::config::BoundCheckConfig;
use crate::error::{CliError, CliResult};
use crate::output::{fmt_f64, write_json, Table};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub instance: usize,
    pub seed: u64,
    pub p: usize,
    pub k: usize,
    pub rho: f64,
    pub psd: bool,
    pub err: f64,
    pub bound: f64,
    pub violation: bool,
    pub status: String,
}

impl BoundRow {
    pub fn ratio(&self) -> f64 {
        if self.bound > 0.0 {
            self.err / self.bound
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub judged: usize,
    pub violations: usize,
    pub errors: usize,
}

struct Instance {
    h: DenseOperator,
    mixed: nalgebra::DMatrix<f64>,
    bundle: DerivativeBundle,
    k: usize,
    psd: bool,
}

fn make_instance(cfg: &BoundCheckConfig, seed: u64, psd: bool) -> CliResult<Instance> {
    let mut r = rng::seeded(seed);
    let p = r.random_range(cfg.p_min..=cfg.p_max);
    let rank = r.random_range(1..=p);
    let k = if cfg.full_rank { p } else { r.random_range(1..=p) };
    let mut hm = rng::gram_psd(&mut r, p, rank) / p as f64;
    if !psd {
        // shift part of the spectrum below zero
        let shift = 0.5 * hm.diagonal().mean();
        for i in 0..p {
            hm[(i, i)] -= shift;
        }
    }
    let h = DenseOperator::new(hm)?;
    let mixed = rng::normal_matrix(&mut r, p, cfg.outer_dim);
    let g = rng::normal_vector(&mut r, p);
    let gphi = rng::normal_vector(&mut r, cfg.outer_dim);
    let bundle = DerivativeBundle::new(g, gphi, Box::new(h.clone()), Box::new(DenseMixed::new(mixed.clone())))?;
    Ok(Instance { h, mixed, bundle, k, psd })
}

pub fn compute(cfg: &BoundCheckConfig) -> CliResult<BoundReport> {
    let indefinite = if cfg.include_indefinite { (cfg.instances / 10).max(1) } else { 0 };
    let mut rows = Vec::new();
    for instance in 0..cfg.instances + indefinite {
        let base = cfg.seeds[instance % cfg.seeds.len()];
        let seed = rng::derive_seed(base, instance as u64);
        let psd = instance < cfg.instances;
        let rho = cfg.rho[instance % cfg.rho.len()];
        let inst = make_instance(cfg, seed, psd)?;
        let ny = NystromConfig::new(inst.k, rho).with_sampling(SamplingStrategy {
            kind: cfg.sampling,
            seed: rng::derive_seed(seed, 1),
        });
        let (err, bound, status) = match hypergradient_error(&inst.bundle, &inst.h, &inst.mixed, &ny) {
            Ok(e) => (e.err, e.bound, "ok".to_string()),
            Err(e) => (f64::NAN, f64::NAN, format!("error: {e}")),
        };
        let violation = inst.psd && !(err <= bound + cfg.tolerance);
        rows.push(BoundRow {
            instance,
            seed,
            p: inst.h.dim(),
            k: inst.k,
            rho,
            psd: inst.psd,
            err,
            bound,
            violation,
            status,
        });
    }
    let judged: Vec<&BoundRow> = rows.iter().filter(|r| r.psd).collect();
    Ok(BoundReport {
        judged: judged.len(),
        violations: judged.iter().filter(|r| r.violation).count(),
        errors: judged.iter().filter(|r| r.status != "ok").count(),
        rows,
    })
}

pub fn run(cfg: &BoundCheckConfig) -> CliResult<Written> {
    let report = compute(cfg)?;
    let mut written = Written::default();
    let dir = cfg.output_dir.as_path();
    let mut t = Table::new(&["instance", "seed", "p", "k", "rho", "class", "err", "bound", "ratio", "violation", "status"]);
    for r in &report.rows {
        t.push(vec![
            r.instance.to_string(),
            r.seed.to_string(),
            r.p.to_string(),
            r.k.to_string(),
            fmt_f64(r.rho),
            if r.psd { "PSD".into() } else { "non-PSD".into() },
            fmt_f64(r.err),
            fmt_f64(r.bound),
            fmt_f64(r.ratio()),
            r.violation.to_string(),
            r.status.clone(),
        ]);
    }
    t.write(&written.add(dir, "bound_check.csv"))?;
    write_json(&written.add(dir, "bound_summary.json"), &report)?;
    if report.violations > 0 {
        return Err(CliError::Numerical(format!(
            "{} of {} PSD instances exceed the bound",
            report.violations, report.judged
        )));
    }
    Ok(written)
}
