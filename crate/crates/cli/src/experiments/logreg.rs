//! Per-parameter weight decay on logistic regression, compared across backends.

use hypergrad::{compare_backends, IhvpConfig, LogRegTask, RunRecord};
use serde::Serialize;

use super::Written;
use crate::config::{LogRegConfig, SweepGroup};
use crate::error::CliResult;
use crate::output::{fmt_f64, fmt_opt, write_json, Table};
use crate::plots::{self, Series};

/// Final validation loss used for ranking; a failed run counts as `+∞`.
pub fn final_val_loss(rec: &RunRecord) -> f64 {
    match (&rec.failure, rec.final_val_loss()) {
        (None, Some(v)) => v,
        _ => f64::INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendSummary {
    pub backend: String,
    pub ihvp: IhvpConfig,
    pub groups: Vec<SweepGroup>,
    pub in_comparison: bool,
    pub final_val_losses: Vec<f64>,
    pub mean_final_val_loss: f64,
    pub failures: Vec<Option<String>>,
    pub mean_hypergrad_ms: f64,
    pub mean_oracle_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSpread {
    pub group: SweepGroup,
    /// `max − min` of the per-backend mean final validation losses.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRegReport {
    pub seeds: Vec<u64>,
    pub backends: Vec<BackendSummary>,
    pub sweep_spreads: Vec<GroupSpread>,
    /// Spread over the union of the two Nyström sweep groups.
    pub nystrom_sweep_spread: Option<f64>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

impl LogRegReport {
    pub fn backend(&self, label: &str) -> Option<&BackendSummary> {
        self.backends.iter().find(|b| b.backend == label)
    }

    /// Records for backend `index`, in seed order.
    pub fn records_of(&self, index: usize) -> &[RunRecord] {
        let n = self.seeds.len();
        &self.records[index * n..(index + 1) * n]
    }
}

fn spread<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if hi.is_infinite() {
        f64::INFINITY
    } else {
        hi - lo
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Backends of the comparison plus the sweep grid, without duplicates.
fn backend_list(cfg: &LogRegConfig) -> Vec<(IhvpConfig, Vec<SweepGroup>, bool)> {
    let mut list: Vec<(IhvpConfig, Vec<SweepGroup>, bool)> = Vec::new();
    for c in &cfg.ihvp {
        if !list.iter().any(|(x, _, _)| x == c) {
            list.push((*c, Vec::new(), true));
        }
    }
    if let Some(sweep) = &cfg.sweep {
        for (group, c) in sweep.expand() {
            match list.iter_mut().find(|(x, _, _)| *x == c) {
                Some(entry) => entry.1.push(group),
                None => list.push((c, vec![group], false)),
            }
        }
    }
    list
}

pub fn compute(cfg: &LogRegConfig) -> CliResult<LogRegReport> {
    let list = backend_list(cfg);
    let ihvps: Vec<IhvpConfig> = list.iter().map(|(c, _, _)| *c).collect();
    let records = compare_backends(
        |seed| LogRegTask::generate(&cfg.task.spec(seed)),
        &cfg.schedule.schedule(0),
        &ihvps,
        &cfg.seeds,
        cfg.jobs,
    )?;
    let n = cfg.seeds.len();
    let backends: Vec<BackendSummary> = list
        .iter()
        .enumerate()
        .map(|(i, (c, groups, in_comparison))| {
            let recs = &records[i * n..(i + 1) * n];
            let finals: Vec<f64> = recs.iter().map(final_val_loss).collect();
            let hg: Vec<(f64, usize)> = recs
                .iter()
                .flat_map(|r| r.windows.iter())
                .filter_map(|w| Some((w.hypergrad_wall_ms?, w.oracle_calls?)))
                .collect();
            let count = hg.len().max(1) as f64;
            BackendSummary {
                backend: c.label(),
                ihvp: *c,
                groups: groups.clone(),
                in_comparison: *in_comparison,
                mean_final_val_loss: mean(&finals),
                final_val_losses: finals,
                failures: recs.iter().map(|r| r.failure.clone()).collect(),
                mean_hypergrad_ms: hg.iter().map(|h| h.0).sum::<f64>() / count,
                mean_oracle_calls: hg.iter().map(|h| h.1 as f64).sum::<f64>() / count,
            }
        })
        .collect();

    let group_values = |g: SweepGroup| -> Vec<f64> {
        backends
            .iter()
            .filter(|b| b.groups.contains(&g))
            .map(|b| b.mean_final_val_loss)
            .collect()
    };
    let mut sweep_spreads = Vec::new();
    let mut nystrom_sweep_spread = None;
    if cfg.sweep.is_some() {
        for g in [SweepGroup::NystromRho, SweepGroup::NystromRank, SweepGroup::NeumannAlpha] {
            let vals = group_values(g);
            if !vals.is_empty() {
                sweep_spreads.push(GroupSpread {
                    group: g,
                    spread: spread(vals.iter()),
                });
            }
        }
        let mut ny = group_values(SweepGroup::NystromRho);
        ny.extend(group_values(SweepGroup::NystromRank));
        if !ny.is_empty() {
            nystrom_sweep_spread = Some(spread(ny.iter()));
        }
    }
    Ok(LogRegReport {
        seeds: cfg.seeds.clone(),
        backends,
        sweep_spreads,
        nystrom_sweep_spread,
        records,
    })
}

/// One row per inner step (`inner_step < T`, training loss before the step)
/// and one per window end (`inner_step = T`, with validation loss and the
/// hypergradient wall time).
pub fn steps_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&["outer_step", "inner_step", "train_loss", "val_loss", "backend", "seed", "wall_ms"]);
    for rec in records {
        let steps = rec.schedule.inner_steps;
        for (i, loss) in rec.train_losses.iter().enumerate() {
            t.push(vec![
                (i / steps).to_string(),
                (i % steps).to_string(),
                fmt_f64(*loss),
                String::new(),
                rec.backend.clone(),
                rec.seed.to_string(),
                String::new(),
            ]);
        }
        for w in &rec.windows {
            t.push(vec![
                w.window.to_string(),
                steps.to_string(),
                fmt_f64(w.train_loss_end),
                fmt_f64(w.val_loss),
                rec.backend.clone(),
                rec.seed.to_string(),
                fmt_opt(w.hypergrad_wall_ms),
            ]);
        }
    }
    t
}

pub fn run(cfg: &LogRegConfig, plots: bool) -> CliResult<Written> {
    let report = compute(cfg)?;
    let mut written = Written::default();
    let dir = cfg.output_dir.as_path();
    steps_table(&report.records).write(&written.add(dir, "steps.csv"))?;

    let mut finals = Table::new(&["backend", "seed", "final_val_loss", "failure"]);
    for rec in &report.records {
        finals.push(vec![
            rec.backend.clone(),
            rec.seed.to_string(),
            fmt_f64(final_val_loss(rec)),
            rec.failure.clone().unwrap_or_default(),
        ]);
    }
    finals.write(&written.add(dir, "final_val_loss.csv"))?;
    write_json(&written.add(dir, "summary.json"), &report)?;

    if plots {
        let n = report.seeds.len();
        let mut val = Vec::new();
        let mut train = Vec::new();
        for (i, b) in report.backends.iter().enumerate() {
            let recs = &report.records[i * n..(i + 1) * n];
            let windows = recs.iter().map(|r| r.windows.len()).min().unwrap_or(0);
            let points = (0..windows)
                .map(|w| (w as f64, recs.iter().map(|r| r.windows[w].val_loss).sum::<f64>() / n as f64))
                .collect();
            val.push(Series {
                name: b.backend.clone(),
                points,
            });
            train.push(Series {
                name: format!("{} seed {}", b.backend, recs[0].seed),
                points: recs[0].train_losses.iter().enumerate().map(|(i, l)| (i as f64, *l)).collect(),
            });
        }
        plots::line_chart(
            &written.add(dir, "val_loss.svg"),
            "validation loss (mean over seeds)",
            "outer step",
            "validation BCE",
            &val,
        )?;
        plots::line_chart(&written.add(dir, "train_loss.svg"), "inner training loss", "inner step", "training loss", &train)?;
    }
    Ok(written)
}
