//! Wall time and kernel workspace of one hypergradient per backend and size.

use std::time::Instant;

use hypergrad::{
    hypergradient, BilevelProblem, CgBackend, DerivativeBundle, IhvpConfig, InversePlan, LogRegTask, NeumannBackend,
    NystromConfig,
};
use nalgebra::DVector;
use serde::Serialize;

use super::Written;
use crate::config::BenchConfig;
use crate::error::CliResult;
use crate::output::{fmt_f64, write_json, Table};
use crate::plots::{self, Series};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCell {
    /// `nystrom-full`, `nystrom-rank1`, `nystrom-chunkedκ`, `cg` or `neumann`.
    pub family: String,
    /// `k` or `l`.
    pub size: usize,
    pub backend: String,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub workspace_bytes: usize,
    pub factor_bytes: usize,
    pub oracle_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trends {
    pub neumann_time_ratio: Option<f64>,
    pub cg_time_ratio: Option<f64>,
    pub nystrom_full_time_ratio: Option<f64>,
    /// `max/min − 1` of the rank-1 workspace over the benchmarked `k`.
    pub rank1_workspace_spread: Option<f64>,
    /// `r²` of a linear fit of full-plan workspace against `k`.
    pub full_workspace_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub dim: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub cells: Vec<BenchCell>,
    pub trends: Trends,
}

impl BenchReport {
    pub fn cell(&self, family: &str, size: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.family == family && c.size == size)
    }

    fn time_ratio(&self, family: &str, hi: usize, lo: usize) -> Option<f64> {
        Some(self.cell(family, hi)?.median_ms / self.cell(family, lo)?.median_ms)
    }

    fn series(&self, family: &str) -> Vec<(usize, &BenchCell)> {
        let mut v: Vec<_> = self.cells.iter().filter(|c| c.family == family).map(|c| (c.size, c)).collect();
        v.sort_by_key(|(s, _)| *s);
        v
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn family(cfg: &IhvpConfig) -> String {
    match cfg {
        IhvpConfig::Nystrom(n) => format!("nystrom-{}", n.plan.label()),
        IhvpConfig::Cg(_) => "cg".into(),
        IhvpConfig::Neumann(_) => "neumann".into(),
    }
}

fn size(cfg: &IhvpConfig) -> usize {
    match cfg {
        IhvpConfig::Nystrom(n) => n.rank,
        IhvpConfig::Cg(c) => c.max_iters,
        IhvpConfig::Neumann(n) => n.truncation,
    }
}

pub fn cells(cfg: &BenchConfig) -> Vec<IhvpConfig> {
    let mut out = Vec::new();
    for &l in &cfg.iterative_l {
        out.push(IhvpConfig::Neumann(NeumannBackend::new(l, cfg.neumann_alpha, cfg.rho)));
        out.push(IhvpConfig::Cg(CgBackend::new(l, cfg.rho)));
    }
    for plan in &cfg.plans {
        for &k in &cfg.nystrom_k {
            if plan.kappa(k).is_ok() {
                out.push(IhvpConfig::Nystrom(NystromConfig::new(k, cfg.rho).with_plan(*plan)));
            }
        }
    }
    out
}

/// A logistic-regression bundle at a small random `θ` and `φ = 1`.
pub fn fixed_bundle(cfg: &BenchConfig) -> CliResult<DerivativeBundle> {
    let seed = cfg.seeds[0];
    let task = LogRegTask::generate(&cfg.task.spec(seed))?;
    let mut r = hypergrad::rng::seeded(hypergrad::rng::derive_seed(seed, 0xBE));
    let theta = task.init_inner(&mut r) * 10.0;
    let phi = DVector::from_element(cfg.task.dim, 1.0);
    Ok(task.bundle_at(&theta, &phi)?)
}

pub fn time_cell(bundle: &DerivativeBundle, ihvp: &IhvpConfig, warmup: usize, reps: usize) -> CliResult<BenchCell> {
    for _ in 0..warmup {
        hypergradient(bundle, ihvp)?;
    }
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let start = Instant::now();
        let (_, diag) = hypergradient(bundle, ihvp)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        last = Some(diag);
    }
    let diag = last.expect("at least one repetition");
    Ok(BenchCell {
        family: family(ihvp),
        size: size(ihvp),
        backend: ihvp.label(),
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: times.iter().copied().fold(0.0, f64::max),
        median_ms: median(times),
        workspace_bytes: diag.workspace_bytes,
        factor_bytes: diag.factor_bytes,
        oracle_calls: diag.oracle_calls,
    })
}

pub fn compute(cfg: &BenchConfig) -> CliResult<BenchReport> {
    let bundle = fixed_bundle(cfg)?;
    let cells = cells(cfg)
        .iter()
        .map(|c| time_cell(&bundle, c, cfg.warmup, cfg.repetitions))
        .collect::<CliResult<Vec<_>>>()?;
    let mut report = BenchReport {
        dim: cfg.task.dim,
        warmup: cfg.warmup,
        repetitions: cfg.repetitions,
        cells,
        trends: Trends {
            neumann_time_ratio: None,
            cg_time_ratio: None,
            nystrom_full_time_ratio: None,
            rank1_workspace_spread: None,
            full_workspace_r2: None,
        },
    };
    let full = format!("nystrom-{}", InversePlan::Full.label());
    let rank1 = format!("nystrom-{}", InversePlan::Rank1.label());
    report.trends.neumann_time_ratio = report.time_ratio("neumann", 20, 5);
    report.trends.cg_time_ratio = report.time_ratio("cg", 20, 5);
    report.trends.nystrom_full_time_ratio = report.time_ratio(&full, 20, 5);
    let r1: Vec<f64> = report.series(&rank1).iter().map(|(_, c)| c.workspace_bytes as f64).collect();
    if r1.len() >= 2 {
        let lo = r1.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r1.iter().copied().fold(0.0, f64::max);
        report.trends.rank1_workspace_spread = Some(hi / lo - 1.0);
    }
    let fw: Vec<(f64, f64)> = report
        .series(&full)
        .iter()
        .map(|(k, c)| (*k as f64, c.workspace_bytes as f64))
        .collect();
    if fw.len() >= 3 {
        report.trends.full_workspace_r2 = Some(r_squared(&fw));
    }
    Ok(report)
}

pub fn run(cfg: &BenchConfig, plots: bool) -> CliResult<Written> {
    let report = compute(cfg)?;
    let mut written = Written::default();
    let dir = cfg.output_dir.as_path();
    let mut t = Table::new(&[
        "family",
        "size",
        "backend",
        "median_ms",
        "min_ms",
        "max_ms",
        "workspace_bytes",
        "factor_bytes",
        "oracle_calls",
        "warmup",
        "repetitions",
    ]);
    for c in &report.cells {
        t.push(vec![
            c.family.clone(),
            c.size.to_string(),
            c.backend.clone(),
            fmt_f64(c.median_ms),
            fmt_f64(c.min_ms),
            fmt_f64(c.max_ms),
            c.workspace_bytes.to_string(),
            c.factor_bytes.to_string(),
            c.oracle_calls.to_string(),
            report.warmup.to_string(),
            report.repetitions.to_string(),
        ]);
    }
    t.write(&written.add(dir, "bench.csv"))?;
    write_json(&written.add(dir, "bench_report.json"), &report)?;
    if plots {
        let mut families: Vec<String> = report.cells.iter().map(|c| c.family.clone()).collect();
        families.dedup();
        let series = |f: &dyn Fn(&BenchCell) -> f64| -> Vec<Series> {
            families
                .iter()
                .map(|fam| Series {
                    name: fam.clone(),
                    points: report.series(fam).iter().map(|(s, c)| (*s as f64, f(c))).collect(),
                })
                .collect()
        };
        plots::line_chart(
            &written.add(dir, "bench_time.svg"),
            "hypergradient wall time",
            "k or l",
            "median ms",
            &series(&|c| c.median_ms),
        )?;
        plots::line_chart(
            &written.add(dir, "bench_workspace.svg"),
            "kernel workspace",
            "k or l",
            "bytes",
            &series(&|c| c.workspace_bytes as f64),
        )?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LogRegSection;

    #[test]
    fn r_squared_of_a_line_is_one() {
        assert!((r_squared(&[(1.0, 3.0), (2.0, 5.0), (4.0, 9.0)]) - 1.0).abs() < 1e-12);
        assert!(r_squared(&[(1.0, 1.0), (2.0, -1.0), (3.0, 1.0), (4.0, -1.0)]) < 0.5);
    }

    #[test]
    fn median_handles_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_bench_report() {
        let cfg = BenchConfig {
            task: LogRegSection {
                dim: 60,
                n_train: 30,
                n_val: 30,
                noise_sigma: 0.1,
            },
            nystrom_k: vec![5, 10, 20],
            repetitions: 3,
            ..Default::default()
        };
        let report = compute(&cfg).unwrap();
        assert_eq!(report.cells.len(), 3 * 2 + 3 * 2);
        assert_eq!(report.cell("neumann", 20).unwrap().oracle_calls, 20);
        assert_eq!(report.cell("nystrom-full", 10).unwrap().oracle_calls, 10);
        assert!(report.trends.full_workspace_r2.unwrap() > 0.9);
    }
}
