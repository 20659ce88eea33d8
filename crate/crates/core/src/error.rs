use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("singular covariance (condition number {condition:.3e})")]
    SingularCovariance { condition: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("insufficient calibration samples: got {got}, need at least {required}")]
    InsufficientCalibration { got: usize, required: usize },

    #[error("box vertex enumeration supports at most {max} dimensions, got {dim}; use a budget or ellipsoid set")]
    TooManyDimensions { dim: usize, max: usize },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("forward cache does not belong to this model")]
    StaleCache,

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("test row {row}: {source}")]
    AtRow {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Lp(_) => "lp",
            Error::SingularCovariance { .. } => "singular_covariance",
            Error::NotPositiveDefinite => "not_positive_definite",
            Error::InsufficientCalibration { .. } => "insufficient_calibration",
            Error::TooManyDimensions { .. } => "too_many_dimensions",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::StaleCache => "stale_cache",
            Error::AtIteration { source, .. } | Error::AtRow { source, .. } => source.kind(),
            Error::AllTrialsFailed(_) => "all_trials_failed",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
