//! Warm-start alternating bilevel driver.
//!
//! A run is a sequence of windows. Each window takes `T` inner gradient
//! steps on `θ` and ends with a hypergradient step on `φ`; one extra window
//! after the last outer update retrains `θ` under the final `φ`, so the
//! final validation loss reflects the final hyperparameters.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::{hypergradient, DerivativeBundle, IhvpConfig, MixedPartial, RunDiagnostics};
use crate::linop::HvpOracle;
use crate::rng::{self, SeededRng};

/// Subset of the training examples an inner evaluation runs on.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Full,
    Indices(&'a [usize]),
}

/// Inner objective `f(θ, φ)` and outer objective `g(θ, φ)` with analytic derivatives.
pub trait BilevelProblem: Sync {
    /// `p = dim θ`
    fn inner_dim(&self) -> usize;
    /// `h = dim φ`
    fn outer_dim(&self) -> usize;

    /// Number of training examples; zero when the inner objective is not a sum over data.
    fn train_size(&self) -> usize {
        0
    }

    fn init_inner(&self, rng: &mut SeededRng) -> DVector<f64>;
    fn init_outer(&self) -> DVector<f64>;

    fn inner_loss(&self, theta: &DVector<f64>, phi: &DVector<f64>, batch: Batch) -> f64;
    fn inner_grad(&self, theta: &DVector<f64>, phi: &DVector<f64>, batch: Batch) -> DVector<f64>;
    fn outer_loss(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> f64;
    fn outer_grad_theta(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64>;
    fn outer_grad_phi(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64>;

    /// `∂²f/∂θ²` at `(θ, φ)` over the full training set.
    fn hvp_at(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> Box<dyn HvpOracle>;
    /// `∂²f/∂φ∂θ` at `(θ, φ)`.
    fn mixed_at(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> Box<dyn MixedPartial>;

    fn bundle_at(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> Result<DerivativeBundle> {
        DerivativeBundle::new(
            self.outer_grad_theta(theta, phi),
            self.outer_grad_phi(theta, phi),
            self.hvp_at(theta, phi),
            self.mixed_at(theta, phi),
        )
    }
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    /// Heavy ball: `v ← μv + g`, `x ← x − lr·v`.
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr())));
        }
        match *self {
            OptimizerConfig::SgdMomentum { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")))
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::invalid("Adam needs β₁, β₂ in [0, 1) and ε > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// First-order optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: DVector<f64>,
    second: DVector<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, dim: usize) -> Self {
        Self {
            cfg,
            first: DVector::zeros(dim),
            second: DVector::zeros(dim),
            steps: 0,
        }
    }

    pub fn reset(&mut self) {
        self.first.fill(0.0);
        self.second.fill(0.0);
        self.steps = 0;
    }

    pub fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) {
        self.steps += 1;
        match self.cfg {
            OptimizerConfig::Sgd { lr } => params.axpy(-lr, grad, 1.0),
            OptimizerConfig::SgdMomentum { lr, momentum } => {
                self.first *= momentum;
                self.first += grad;
                params.axpy(-lr, &self.first, 1.0);
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                self.first.axpy(1.0 - beta1, grad, beta1);
                self.second.zip_apply(grad, |s, g| *s = beta2 * *s + (1.0 - beta2) * g * g);
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for i in 0..params.len() {
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Inner steps `T` between outer updates.
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub reset_inner_on_outer: bool,
    pub inner_optimizer: OptimizerConfig,
    pub outer_optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Minibatch size for inner steps; full batch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_batch_size: Option<usize>,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be at least 1"));
        }
        if self.inner_batch_size == Some(0) {
            return Err(Error::invalid("inner_batch_size must be positive"));
        }
        self.inner_optimizer.validate()?;
        self.outer_optimizer.validate()
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// End-of-window measurements.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRecord {
    pub window: usize,
    /// Validation loss at `(θ_T, φ)` before the outer update.
    pub val_loss: f64,
    /// Inner training loss at `θ_T`.
    pub train_loss_end: f64,
    /// `‖∇_θ f(θ_T, φ)‖`, the residual of the stationarity premise.
    pub inner_grad_norm: f64,
    pub theta_start_norm: f64,
    pub theta_end_norm: f64,
    /// Absent for the final evaluation-only window.
    pub hypergrad_norm: Option<f64>,
    pub hypergrad_wall_ms: Option<f64>,
    pub oracle_calls: Option<usize>,
    pub diagnostics: Option<RunDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub backend: String,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub ihvp: IhvpConfig,
    /// Training loss before every inner step, window-major.
    pub train_losses: Vec<f64>,
    pub windows: Vec<WindowRecord>,
    pub final_phi: Vec<f64>,
    pub failure: Option<String>,
}

impl RunRecord {
    fn empty(schedule: &ScheduleConfig, ihvp: &IhvpConfig) -> Self {
        Self {
            backend: ihvp.label(),
            seed: schedule.seed,
            schedule: *schedule,
            ihvp: *ihvp,
            train_losses: Vec::new(),
            windows: Vec::new(),
            final_phi: Vec::new(),
            failure: None,
        }
    }

    /// Validation loss after the final window.
    pub fn final_val_loss(&self) -> Option<f64> {
        self.windows.last().map(|w| w.val_loss)
    }

    /// Training loss at the first step of each window.
    pub fn reset_losses(&self) -> Vec<f64> {
        self.train_losses
            .iter()
            .step_by(self.schedule.inner_steps)
            .copied()
            .collect()
    }
}

/// A run that stopped early; `partial` holds everything recorded up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Box<RunRecord>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} windows)", self.error, self.partial.windows.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

const STREAM_RESET: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_SAMPLING: u64 = 3;

fn batch_indices(rng: &mut SeededRng, n: usize, size: usize) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, size).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs `outer_steps` hypergradient updates, each after `T` inner steps.
pub fn run<P: BilevelProblem + ?Sized>(
    problem: &P,
    schedule: &ScheduleConfig,
    ihvp: &IhvpConfig,
) -> std::result::Result<RunRecord, RunFailure> {
    let mut record = RunRecord::empty(schedule, ihvp);
    match drive(problem, schedule, ihvp, &mut record) {
        Ok(()) => Ok(record),
        Err(error) => Err(RunFailure {
            error,
            partial: Box::new(record),
        }),
    }
}

fn drive<P: BilevelProblem + ?Sized>(
    problem: &P,
    schedule: &ScheduleConfig,
    ihvp: &IhvpConfig,
    record: &mut RunRecord,
) -> Result<()> {
    schedule.validate()?;
    let p = problem.inner_dim();
    let n_train = problem.train_size();
    if schedule.inner_batch_size.is_some() && n_train == 0 {
        return Err(Error::invalid("problem does not support minibatches"));
    }

    let mut reset_rng = rng::seeded(rng::derive_seed(schedule.seed, STREAM_RESET));
    let mut batch_rng = rng::seeded(rng::derive_seed(schedule.seed, STREAM_BATCH));
    let sampling_base = rng::derive_seed(schedule.seed, STREAM_SAMPLING);

    let mut theta = problem.init_inner(&mut reset_rng);
    let mut phi = problem.init_outer();
    let mut inner_opt = Optimizer::new(schedule.inner_optimizer, p);
    let mut outer_opt = Optimizer::new(schedule.outer_optimizer, problem.outer_dim());

    for window in 0..=schedule.outer_steps {
        let theta_start_norm = theta.norm();
        for step in 0..schedule.inner_steps {
            let global = window * schedule.inner_steps + step;
            let idx;
            let batch = match schedule.inner_batch_size {
                Some(size) => {
                    idx = batch_indices(&mut batch_rng, n_train, size);
                    Batch::Indices(&idx)
                }
                None => Batch::Full,
            };
            let loss = problem.inner_loss(&theta, &phi, batch);
            record.train_losses.push(loss);
            if !loss.is_finite() {
                return Err(divergence(global, "inner training loss is not finite"));
            }
            let grad = problem.inner_grad(&theta, &phi, batch);
            inner_opt.step(&mut theta, &grad);
        }

        let val_loss = problem.outer_loss(&theta, &phi);
        let train_loss_end = problem.inner_loss(&theta, &phi, Batch::Full);
        let inner_grad_norm = problem.inner_grad(&theta, &phi, Batch::Full).norm();
        let mut entry = WindowRecord {
            window,
            val_loss,
            train_loss_end,
            inner_grad_norm,
            theta_start_norm,
            theta_end_norm: theta.norm(),
            hypergrad_norm: None,
            hypergrad_wall_ms: None,
            oracle_calls: None,
            diagnostics: None,
        };
        if !val_loss.is_finite() {
            record.windows.push(entry);
            return Err(divergence(window, "validation loss is not finite"));
        }

        if window < schedule.outer_steps {
            let started = Instant::now();
            let bundle = problem.bundle_at(&theta, &phi)?;
            let cfg = ihvp.reseeded(rng::derive_seed(sampling_base, window as u64));
            let (hg, diag) = match hypergradient(&bundle, &cfg) {
                Ok(out) => out,
                Err(e) => {
                    record.windows.push(entry);
                    return Err(e);
                }
            };
            entry.hypergrad_norm = Some(hg.norm());
            entry.hypergrad_wall_ms = Some(started.elapsed().as_secs_f64() * 1e3);
            entry.oracle_calls = Some(diag.oracle_calls);
            entry.diagnostics = Some(diag);
            record.windows.push(entry);
            if hg.iter().any(|v| !v.is_finite()) {
                return Err(divergence(window, "hypergradient is not finite"));
            }
            outer_opt.step(&mut phi, &hg);
            if schedule.reset_inner_on_outer {
                theta = problem.init_inner(&mut reset_rng);
                inner_opt.reset();
            }
        } else {
            record.windows.push(entry);
        }
        record.final_phi = phi.iter().copied().collect();
    }
    Ok(())
}

fn divergence(step: usize, reason: &str) -> Error {
    Error::Divergence {
        step,
        reason: reason.into(),
        last_finite: None,
    }
}

/// Runs every `(backend, seed)` pair; `make_problem(seed)` builds the data for
/// a seed once and all backends share it. Records come back backend-major in
/// input order; failures are kept as records with `failure` set.
pub fn compare_backends<P, F>(
    make_problem: F,
    schedule: &ScheduleConfig,
    ihvps: &[IhvpConfig],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunRecord>>
where
    P: BilevelProblem,
    F: Fn(u64) -> Result<P>,
{
    if ihvps.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("need at least one backend and one seed"));
    }
    let problems = seeds.iter().map(|&s| make_problem(s)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..ihvps.len())
        .flat_map(|b| (0..seeds.len()).map(move |s| (b, s)))
        .collect();
    let run_cell = |&(b, s): &(usize, usize)| -> RunRecord {
        let sched = schedule.with_seed(seeds[s]);
        match run(&problems[s], &sched, &ihvps[b]) {
            Ok(rec) => rec,
            Err(fail) => {
                let mut rec = *fail.partial;
                rec.failure = Some(fail.error.to_string());
                rec
            }
        }
    };

    let jobs = jobs.clamp(1, cells.len());
    if jobs == 1 {
        return Ok(cells.iter().map(run_cell).collect());
    }
    let mut out: Vec<Option<RunRecord>> = vec![None; cells.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|worker| {
                let cells = &cells;
                let run_cell = &run_cell;
                scope.spawn(move || {
                    (worker..cells.len())
                        .step_by(jobs)
                        .map(|i| (i, run_cell(&cells[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, rec) in h.join().expect("worker panicked") {
                out[i] = Some(rec);
            }
        }
    });
    Ok(out.into_iter().map(|r| r.expect("every cell ran")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_matches_reference() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }, 2);
        let mut x = DVector::from_vec(vec![1.0, -2.0]);
        let mut reference = [1.0f64, -2.0];
        for _ in 0..10 {
            // quadratic ½‖x‖² with grad x
            let g = x.clone();
            opt.step(&mut x, &g);
            for r in &mut reference {
                *r -= 0.1 * *r;
            }
        }
        assert!((x[0] - reference[0]).abs() < 1e-12 && (x[1] - reference[1]).abs() < 1e-12);
    }

    #[test]
    fn momentum_matches_reference() {
        let mut opt = Optimizer::new(OptimizerConfig::SgdMomentum { lr: 0.05, momentum: 0.9 }, 1);
        let mut x = DVector::from_element(1, 3.0);
        let (mut rx, mut rv) = (3.0f64, 0.0f64);
        for _ in 0..10 {
            let g = &x * 2.0;
            opt.step(&mut x, &g);
            rv = 0.9 * rv + 2.0 * rx;
            rx -= 0.05 * rv;
        }
        assert!((x[0] - rx).abs() < 1e-12);
    }

    #[test]
    fn adam_matches_reference() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), 1);
        let mut x = DVector::from_element(1, 1.5);
        let (mut rx, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = &x * 4.0;
            opt.step(&mut x, &g);
            let gr = 4.0 * rx;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            rx -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((x[0] - rx).abs() < 1e-12);
    }

    #[test]
    fn optimizer_validation() {
        assert!(OptimizerConfig::Sgd { lr: 0.0 }.validate().is_err());
        assert!(OptimizerConfig::SgdMomentum { lr: 0.1, momentum: 1.0 }.validate().is_err());
        assert!(OptimizerConfig::adam(1e-3).validate().is_ok());
    }

    use crate::hypergrad::NystromConfig;
    use crate::tasks::{quadratic_closed_form_hypergradient, QuadraticTask, QuadraticTaskSpec};

    fn quad() -> QuadraticTask {
        QuadraticTask::random(&QuadraticTaskSpec { p: 8, seed: 11 }).unwrap()
    }

    fn schedule(inner: usize, outer: usize, reset: bool) -> ScheduleConfig {
        ScheduleConfig {
            inner_steps: inner,
            outer_steps: outer,
            reset_inner_on_outer: reset,
            inner_optimizer: OptimizerConfig::Sgd { lr: 0.2 },
            outer_optimizer: OptimizerConfig::Sgd { lr: 0.05 },
            seed: 5,
            inner_batch_size: None,
        }
    }

    fn exact(p: usize) -> IhvpConfig {
        IhvpConfig::Nystrom(NystromConfig::new(p, 1e-10))
    }

    #[test]
    fn zero_outer_steps() {
        let rec = run(&quad(), &schedule(1, 0, false), &exact(8)).unwrap();
        assert_eq!(rec.train_losses.len(), 1);
        assert_eq!(rec.windows.len(), 1);
        assert!(rec.windows[0].hypergrad_norm.is_none());
    }

    #[test]
    fn warm_start_is_continuous() {
        let rec = run(&quad(), &schedule(5, 4, false), &exact(8)).unwrap();
        for pair in rec.windows.windows(2) {
            assert_eq!(pair[0].theta_end_norm, pair[1].theta_start_norm);
        }
        assert_eq!(rec.train_losses.len(), 25);
        let reset = run(&quad(), &schedule(5, 4, true), &exact(8)).unwrap();
        assert_ne!(reset.windows[0].theta_end_norm, reset.windows[1].theta_start_norm);
    }

    #[test]
    fn runs_are_deterministic() {
        let a = run(&quad(), &schedule(3, 3, true), &exact(8)).unwrap();
        let b = run(&quad(), &schedule(3, 3, true), &exact(8)).unwrap();
        assert_eq!(a.train_losses, b.train_losses);
        assert_eq!(a.final_phi, b.final_phi);
    }

    #[test]
    fn outer_loss_decreases_on_quadratic() {
        let task = quad();
        // long inner windows drive θ to the inner optimum
        let rec = run(&task, &schedule(200, 10, false), &exact(8)).unwrap();
        let vals: Vec<f64> = rec.windows.iter().map(|w| w.val_loss).collect();
        for pair in vals.windows(2) {
            assert!(pair[1] < pair[0], "{vals:?}");
        }
        // the first step follows the exact hypergradient
        let phi0 = DVector::from_element(8, 1.0);
        let hg = quadratic_closed_form_hypergradient(&task, &phi0).unwrap();
        let moved = DVector::from_vec(rec.final_phi.clone()) - &phi0;
        assert!(moved.dot(&hg) < 0.0);
    }

    #[test]
    fn compare_matches_single_runs() {
        let sched = schedule(4, 2, true);
        let ihvps = [exact(8), exact(8)];
        let recs = compare_backends(|_| Ok(quad()), &sched, &ihvps, &[5], 2).unwrap();
        let single = run(&quad(), &sched, &ihvps[0]).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].train_losses, single.train_losses);
        assert_eq!(recs[0].final_phi, recs[1].final_phi);
        assert_eq!(recs[0].windows.len(), recs[1].windows.len());
    }

    #[test]
    fn failures_are_recorded() {
        let mut sched = schedule(2, 2, false);
        sched.inner_optimizer = OptimizerConfig::Sgd { lr: 1e6 };
        let recs = compare_backends(|_| Ok(quad()), &sched, &[exact(8)], &[1], 1).unwrap();
        assert!(recs[0].failure.is_some());
    }
}
