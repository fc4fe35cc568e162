use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time {t} outside path support [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("hazard {value} per grid step at t={t} exceeds 1; refine the grid or lower the hazard")]
    HazardTooLarge { t: f64, value: f64 },

    #[error("intensity {value} at t={t} violates design bounds [{lower}, {upper}]")]
    BoundViolation {
        t: f64,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("identifiability: K_b = {k_b} exceeds K_x = {k_x}")]
    Identifiability { k_b: usize, k_x: usize },

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("ill-conditioned matrix: factorization failed after jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("window anchored at t={anchor_t} is fully missing")]
    FullyMissing { anchor_t: f64 },

    #[error("{dropped} of {total} bootstrap replicates failed (limit 10%)")]
    TooManyFailures { dropped: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => ErrorKind::Io,
            Error::HazardTooLarge { .. }
            | Error::IllConditioned { .. }
            | Error::NonConvergence { .. }
            | Error::TooManyFailures { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
