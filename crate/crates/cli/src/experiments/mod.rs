//! One module per experiment. Each exposes a `compute` function returning
//! structured results and a `run` function that also writes CSV, JSON and
//! SVG files under the configured output directory.

pub mod bench;
pub mod bound_check;
pub mod invert_demo;
pub mod logreg;
pub mod quadratic_oracle;

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::output::ensure_dir;

/// Files an experiment produced.
#[derive(Debug, Clone, Default)]
pub struct Written {
    pub files: Vec<PathBuf>,
}

impl Written {
    pub(crate) fn add(&mut self, dir: &Path, name: &str) -> PathBuf {
        let path = dir.join(name);
        self.files.push(path.clone());
        path
    }
}

/// Dispatches on the experiment kind.
pub fn run(cfg: &ExperimentConfig, plots: bool) -> CliResult<Written> {
    ensure_dir(cfg.output_dir())?;
    match cfg {
        ExperimentConfig::InvertDemo(c) => invert_demo::run(c, plots),
        ExperimentConfig::Logreg(c) => logreg::run(c, plots),
        ExperimentConfig::QuadraticOracle(c) => quadratic_oracle::run(c),
        ExperimentConfig::BoundCheck(c) => bound_check::run(c),
        ExperimentConfig::Bench(c) => bench::run(c, plots),
    }
}
