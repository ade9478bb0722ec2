use nalgebra::DVector;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dense or inner (k×k / κ×κ) system could not be factored.
    #[error("ill-conditioned system: {context}")]
    IllConditioned { context: String },

    /// Eigen/singular decomposition or other dense kernel failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every pivot eigenvalue fell under the floor.
    #[error("degenerate pivot: all {k} pivot eigenvalues were dropped; reduce k or grow rho")]
    DegeneratePivot { k: usize },

    #[error("dimension {dim} exceeds the dense cap of {cap}")]
    Capability { dim: usize, cap: usize },

    /// An iterative solve or trajectory produced non-finite or exploding values.
    #[error("diverged at step {step}: {reason}")]
    Divergence {
        step: usize,
        reason: String,
        last_finite: Option<DVector<f64>>,
    },

    #[error("{backend} backend failed: {source}")]
    Backend {
        backend: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn ill_conditioned(context: impl Into<String>) -> Self {
        Error::IllConditioned {
            context: context.into(),
        }
    }

    /// Unwraps any number of `Backend` layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Backend { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures that signal a numerical blow-up rather than a usage error.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::IllConditioned { .. }
                | Error::Numerical(_)
                | Error::DegeneratePivot { .. }
                | Error::Divergence { .. }
        )
    }
}
