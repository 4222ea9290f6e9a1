use std::path::PathBuf;

use thiserror::Error;

use crate::training::TrainOutcome;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Structural misuse of the differentiation tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("operand belongs to tape {found}, expected tape {expected}")]
    MixedTape { expected: u64, found: u64 },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward() needs a scalar loss, got a {rows}x{cols} node")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("node index {0} is not on this tape")]
    UnknownNode(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("matrix is not symmetric positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("sampler hit a non-finite score or log-density at iteration {iteration}, state {state:?}")]
    SamplerDiverged { iteration: usize, state: Vec<f64> },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, last_good: Box<TrainOutcome> },

    #[error("too many failed observations: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {message}")]
    Parse { what: &'static str, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end:
    /// 1 configuration, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Dimension { .. } | Error::Unsupported(_) => 1,
            Error::Ad(_)
            | Error::NotPositiveDefinite(_)
            | Error::NonFinite { .. }
            | Error::SamplerDiverged { .. }
            | Error::NonFiniteLoss { .. }
            | Error::TooManyFailures { .. } => 2,
            Error::Io { .. } => 3,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}
