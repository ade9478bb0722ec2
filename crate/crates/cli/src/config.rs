//! Experiment configuration files.
//!
//! One TOML file describes one experiment. The `experiment` key selects the
//! schema and every other key must belong to it; unknown keys are rejected.

use std::path::{Path, PathBuf};

use hypergrad::nystrom::SamplingKind;
use hypergrad::{
    CgBackend, IhvpConfig, InversePlan, LogRegTaskSpec, NeumannBackend, NystromConfig, OptimizerConfig,
    ScheduleConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    InvertDemo(InvertDemoConfig),
    Logreg(LogRegConfig),
    QuadraticOracle(QuadraticOracleConfig),
    BoundCheck(BoundCheckConfig),
    Bench(BenchConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    InvertDemo,
    Logreg,
    QuadraticOracle,
    BoundCheck,
    Bench,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::InvertDemo => "invert-demo",
            ExperimentKind::Logreg => "logreg",
            ExperimentKind::QuadraticOracle => "quadratic-oracle",
            ExperimentKind::BoundCheck => "bound-check",
            ExperimentKind::Bench => "bench",
        }
    }

    pub fn default_config(self) -> ExperimentConfig {
        match self {
            ExperimentKind::InvertDemo => ExperimentConfig::InvertDemo(InvertDemoConfig::default()),
            ExperimentKind::Logreg => ExperimentConfig::Logreg(LogRegConfig::default()),
            ExperimentKind::QuadraticOracle => ExperimentConfig::QuadraticOracle(QuadraticOracleConfig::default()),
            ExperimentKind::BoundCheck => ExperimentConfig::BoundCheck(BoundCheckConfig::default()),
            ExperimentKind::Bench => ExperimentConfig::Bench(BenchConfig::default()),
        }
    }
}

impl ExperimentConfig {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            ExperimentConfig::InvertDemo(_) => ExperimentKind::InvertDemo,
            ExperimentConfig::Logreg(_) => ExperimentKind::Logreg,
            ExperimentConfig::QuadraticOracle(_) => ExperimentKind::QuadraticOracle,
            ExperimentConfig::BoundCheck(_) => ExperimentKind::BoundCheck,
            ExperimentConfig::Bench(_) => ExperimentKind::Bench,
        }
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn output_dir(&self) -> &Path {
        match self {
            ExperimentConfig::InvertDemo(c) => &c.output_dir,
            ExperimentConfig::Logreg(c) => &c.output_dir,
            ExperimentConfig::QuadraticOracle(c) => &c.output_dir,
            ExperimentConfig::BoundCheck(c) => &c.output_dir,
            ExperimentConfig::Bench(c) => &c.output_dir,
        }
    }

    fn seeds_mut(&mut self) -> &mut Vec<u64> {
        match self {
            ExperimentConfig::InvertDemo(c) => &mut c.seeds,
            ExperimentConfig::Logreg(c) => &mut c.seeds,
            ExperimentConfig::QuadraticOracle(c) => &mut c.seeds,
            ExperimentConfig::BoundCheck(c) => &mut c.seeds,
            ExperimentConfig::Bench(c) => &mut c.seeds,
        }
    }

    /// Applies command-line overrides on top of the file.
    pub fn override_with(&mut self, output: Option<PathBuf>, seeds: Option<Vec<u64>>, jobs: Option<usize>) {
        if let Some(dir) = output {
            match self {
                ExperimentConfig::InvertDemo(c) => c.output_dir = dir,
                ExperimentConfig::Logreg(c) => c.output_dir = dir,
                ExperimentConfig::QuadraticOracle(c) => c.output_dir = dir,
                ExperimentConfig::BoundCheck(c) => c.output_dir = dir,
                ExperimentConfig::Bench(c) => c.output_dir = dir,
            }
        }
        if let Some(seeds) = seeds {
            *self.seeds_mut() = seeds;
        }
        if let (Some(jobs), ExperimentConfig::Logreg(c)) = (jobs, &mut *self) {
            c.jobs = jobs;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let seeds = match self {
            ExperimentConfig::InvertDemo(c) => {
                c.validate()?;
                &c.seeds
            }
            ExperimentConfig::Logreg(c) => {
                c.validate()?;
                &c.seeds
            }
            ExperimentConfig::QuadraticOracle(c) => {
                c.validate()?;
                &c.seeds
            }
            ExperimentConfig::BoundCheck(c) => {
                c.validate()?;
                &c.seeds
            }
            ExperimentConfig::Bench(c) => {
                c.validate()?;
                &c.seeds
            }
        };
        require(!seeds.is_empty(), "seeds must not be empty")
    }
}

fn require(ok: bool, msg: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg.into()))
    }
}

fn five_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// Inverse comparison on a rank-deficient PSD matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvertDemoConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub p: usize,
    pub rank: usize,
    pub rho: f64,
    pub nystrom_ranks: Vec<usize>,
    pub neumann_terms: Vec<usize>,
    pub neumann_alpha: f64,
    pub sampling: SamplingKind,
}

impl Default for InvertDemoConfig {
    fn default() -> Self {
        Self {
            output_dir: "results/invert-demo".into(),
            seeds: five_seeds(),
            p: 40,
            rank: 20,
            rho: 0.1,
            nystrom_ranks: vec![5, 10, 20],
            neumann_terms: vec![5, 10, 20],
            neumann_alpha: 0.01,
            sampling: SamplingKind::Uniform,
        }
    }
}

impl InvertDemoConfig {
    fn validate(&self) -> CliResult<()> {
        require(self.rank >= 1 && self.rank <= self.p, "need 1 ≤ rank ≤ p")?;
        require(self.rho > 0.0, "rho must be positive")?;
        require(self.neumann_alpha > 0.0, "neumann_alpha must be positive")?;
        require(self.p <= hypergrad::linop::DEFAULT_DENSE_CAP, "p exceeds the dense capacity")?;
        require(
            self.nystrom_ranks.iter().all(|&k| k >= 1 && k <= self.p),
            "every Nyström rank must lie in [1, p]",
        )?;
        require(self.neumann_terms.iter().all(|&l| l >= 1), "Neumann terms must be positive")
    }
}

/// Data-generation fields of the logistic task; the seed comes from `seeds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogRegSection {
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub noise_sigma: f64,
}

impl Default for LogRegSection {
    fn default() -> Self {
        let d = LogRegTaskSpec::default();
        Self {
            dim: d.dim,
            n_train: d.n_train,
            n_val: d.n_val,
            noise_sigma: d.noise_sigma,
        }
    }
}

impl LogRegSection {
    pub fn spec(&self, seed: u64) -> LogRegTaskSpec {
        LogRegTaskSpec {
            dim: self.dim,
            n_train: self.n_train,
            n_val: self.n_val,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }

    fn validate(&self) -> CliResult<()> {
        require(self.dim > 0 && self.n_train > 0 && self.n_val > 0, "task sizes must be positive")?;
        require(self.noise_sigma >= 0.0, "noise_sigma must be nonnegative")
    }
}

/// Alternation schedule; the run seed comes from `seeds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub reset_inner_on_outer: bool,
    pub inner_optimizer: OptimizerConfig,
    pub outer_optimizer: OptimizerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_batch_size: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            inner_steps: 100,
            outer_steps: 100,
            reset_inner_on_outer: true,
            inner_optimizer: OptimizerConfig::Sgd { lr: 0.1 },
            outer_optimizer: OptimizerConfig::SgdMomentum { lr: 1.0, momentum: 0.9 },
            inner_batch_size: None,
        }
    }
}

impl ScheduleSection {
    pub fn schedule(&self, seed: u64) -> ScheduleConfig {
        ScheduleConfig {
            inner_steps: self.inner_steps,
            outer_steps: self.outer_steps,
            reset_inner_on_outer: self.reset_inner_on_outer,
            inner_optimizer: self.inner_optimizer,
            outer_optimizer: self.outer_optimizer,
            seed,
            inner_batch_size: self.inner_batch_size,
        }
    }
}

/// Extra backends for the robustness grid, each varying one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub nystrom_rho: Vec<f64>,
    pub nystrom_rank: Vec<usize>,
    pub neumann_alpha: Vec<f64>,
    /// Rank held fixed while `nystrom_rho` varies.
    pub base_rank: usize,
    /// `ρ` held fixed while `nystrom_rank` varies, and used by the Neumann sweep.
    pub base_rho: f64,
    pub neumann_terms: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            nystrom_rho: vec![0.01, 0.1, 1.0],
            nystrom_rank: vec![5, 10, 20],
            neumann_alpha: vec![0.01, 0.1, 1.0],
            base_rank: 5,
            base_rho: 0.01,
            neumann_terms: 5,
        }
    }
}

/// Which parameter a sweep entry varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepGroup {
    NystromRho,
    NystromRank,
    NeumannAlpha,
}

impl SweepConfig {
    /// Backends of the grid, tagged with the group they belong to.
    pub fn expand(&self) -> Vec<(SweepGroup, IhvpConfig)> {
        let mut out = Vec::new();
        for &rho in &self.nystrom_rho {
            out.push((SweepGroup::NystromRho, IhvpConfig::Nystrom(NystromConfig::new(self.base_rank, rho))));
        }
        for &k in &self.nystrom_rank {
            out.push((SweepGroup::NystromRank, IhvpConfig::Nystrom(NystromConfig::new(k, self.base_rho))));
        }
        for &alpha in &self.neumann_alpha {
            out.push((
                SweepGroup::NeumannAlpha,
                IhvpConfig::Neumann(NeumannBackend::new(self.neumann_terms, alpha, self.base_rho)),
            ));
        }
        out
    }
}

pub fn standard_backends(l: usize, alpha: f64, rho: f64) -> Vec<IhvpConfig> {
    vec![
        IhvpConfig::Nystrom(NystromConfig::new(l, rho)),
        IhvpConfig::Neumann(NeumannBackend::new(l, alpha, rho)),
        IhvpConfig::Cg(CgBackend::new(l, rho)),
    ]
}

/// Weight-decay tuning of logistic regression, compared across backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogRegConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub task: LogRegSection,
    pub schedule: ScheduleSection,
    pub ihvp: Vec<IhvpConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            output_dir: "results/logreg".into(),
            seeds: five_seeds(),
            jobs: 1,
            task: LogRegSection::default(),
            schedule: ScheduleSection::default(),
            ihvp: standard_backends(5, 0.01, 0.01),
            sweep: None,
        }
    }
}

impl LogRegConfig {
    fn validate(&self) -> CliResult<()> {
        self.task.validate()?;
        self.schedule.schedule(0).validate().map_err(CliError::from)?;
        require(!self.ihvp.is_empty(), "ihvp must list at least one backend")?;
        require(self.jobs >= 1, "jobs must be at least 1")?;
        let mut all: Vec<IhvpConfig> = self.ihvp.clone();
        if let Some(sweep) = &self.sweep {
            all.extend(sweep.expand().into_iter().map(|(_, c)| c));
        }
        for c in &all {
            validate_ihvp(c, self.task.dim)?;
        }
        Ok(())
    }
}

pub fn validate_ihvp(c: &IhvpConfig, p: usize) -> CliResult<()> {
    require(c.rho() > 0.0 && c.rho().is_finite(), "every backend needs a positive rho")?;
    match c {
        IhvpConfig::Nystrom(n) => {
            require(n.rank >= 1 && n.rank <= p, "Nyström rank must lie in [1, p]")?;
            n.plan.kappa(n.rank).map_err(CliError::from)?;
            Ok(())
        }
        IhvpConfig::Cg(cg) => require(cg.max_iters >= 1, "CG needs at least one iteration"),
        IhvpConfig::Neumann(ne) => require(ne.truncation >= 1 && ne.alpha > 0.0, "Neumann needs l ≥ 1 and α > 0"),
    }
}

/// Pipeline hypergradients on quadratic tasks against the closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticOracleConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub p: usize,
    pub ihvp: Vec<IhvpConfig>,
    /// Largest accepted relative error; exceeding it is a numerical failure.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

impl Default for QuadraticOracleConfig {
    fn default() -> Self {
        Self {
            output_dir: "results/quadratic-oracle".into(),
            seeds: (0..20).collect(),
            p: 20,
            ihvp: vec![IhvpConfig::Nystrom(NystromConfig::new(20, 1e-8))],
            tolerance: Some(1e-4),
        }
    }
}

impl QuadraticOracleConfig {
    fn validate(&self) -> CliResult<()> {
        require(self.p >= 1, "p must be positive")?;
        require(!self.ihvp.is_empty(), "ihvp must list at least one backend")?;
        for c in &self.ihvp {
            validate_ihvp(c, self.p)?;
        }
        Ok(())
    }
}

/// Numerical check of the hypergradient error bound on random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundCheckConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub instances: usize,
    pub p_min: usize,
    pub p_max: usize,
    pub rho: Vec<f64>,
    /// Outer dimension `h` of the random mixed partial.
    pub outer_dim: usize,
    /// Use `k = p` on every instance.
    pub full_rank: bool,
    /// Also generate instances with an indefinite `H`; they are reported but not judged.
    pub include_indefinite: bool,
    pub sampling: SamplingKind,
    pub tolerance: f64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self {
            output_dir: "results/bound-check".into(),
            seeds: vec![0],
            instances: 100,
            p_min: 5,
            p_max: 100,
            rho: vec![0.01, 0.1, 1.0],
            outer_dim: 10,
            full_rank: false,
            include_indefinite: false,
            sampling: SamplingKind::Uniform,
            tolerance: 1e-9,
        }
    }
}

impl BoundCheckConfig {
    fn validate(&self) -> CliResult<()> {
        require(self.instances >= 1, "instances must be positive")?;
        require(self.p_min >= 1 && self.p_min <= self.p_max, "need 1 ≤ p_min ≤ p_max")?;
        if self.p_max > hypergrad::linop::DEFAULT_DENSE_CAP {
            return Err(hypergrad::Error::Capability {
                dim: self.p_max,
                cap: hypergrad::linop::DEFAULT_DENSE_CAP,
            }
            .into());
        }
        require(!self.rho.is_empty() && self.rho.iter().all(|r| *r > 0.0), "rho values must be positive")?;
        require(self.outer_dim >= 1, "outer_dim must be positive")?;
        require(self.tolerance >= 0.0, "tolerance must be nonnegative")
    }
}

/// Timing and workspace of one hypergradient per backend and size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub task: LogRegSection,
    pub rho: f64,
    pub neumann_alpha: f64,
    /// Iteration counts `l` for CG and Neumann.
    pub iterative_l: Vec<usize>,
    pub nystrom_k: Vec<usize>,
    pub plans: Vec<InversePlan>,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            output_dir: "results/bench".into(),
            seeds: vec![0],
            task: LogRegSection {
                dim: 20_000,
                n_train: 200,
                n_val: 200,
                noise_sigma: 0.1,
            },
            rho: 0.01,
            neumann_alpha: 0.01,
            iterative_l: vec![5, 10, 20],
            nystrom_k: vec![5, 10, 20, 40],
            plans: vec![InversePlan::Full, InversePlan::Rank1],
            warmup: 1,
            repetitions: 9,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> CliResult<()> {
        self.task.validate()?;
        require(self.warmup >= 1, "bench needs at least one warmup run")?;
        require(self.repetitions >= 3, "bench needs at least three repetitions")?;
        require(self.rho > 0.0 && self.neumann_alpha > 0.0, "rho and neumann_alpha must be positive")?;
        require(self.iterative_l.iter().all(|&l| l >= 1), "iteration counts must be positive")?;
        require(
            self.nystrom_k.iter().all(|&k| k >= 1 && k <= self.task.dim),
            "Nyström ranks must lie in [1, dim]",
        )
    }
}
