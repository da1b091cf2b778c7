use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("natural parameter {value:.3} at cell ({row}, {col}) exceeds the exp cap {cap}")]
    NumericRange {
        row: usize,
        col: usize,
        value: f64,
        cap: f64,
    },

    #[error("all observed counts are zero; the offset is not identifiable")]
    DegenerateOffset,

    #[error("information matrix is singular; covariates are linearly dependent on the observed cells")]
    RankDeficient,

    #[error("{what} did not converge in {iters} iterations")]
    NonConvergence { what: &'static str, iters: usize },

    #[error("svd failed to converge")]
    SvdFailure,

    #[error("{failed} of {total} bootstrap replicates failed (first error: {first})")]
    BootstrapFailure {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("could not build a validation split: {0}")]
    FoldConstruction(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end: 1 for anything the
    /// user can fix in their inputs, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch(_)
            | Error::Invalid(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::FoldConstruction(_) => 1,
            Error::NonFinite(_)
            | Error::NumericRange { .. }
            | Error::DegenerateOffset
            | Error::RankDeficient
            | Error::NonConvergence { .. }
            | Error::SvdFailure
            | Error::BootstrapFailure { .. } => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
