use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive price {value} for asset `{asset}` at index {index}")]
    NonPositivePrice {
        asset: String,
        index: usize,
        value: f64,
    },

    #[error("invalid price series: {0}")]
    InvalidSeries(String),

    #[error("aggregation window of {window} days at t={t} exceeds series of {len} fluctuations")]
    OutOfRange { t: usize, window: usize, len: usize },

    #[error("date indices of series are not aligned: {0}")]
    Alignment(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged: non-finite value in layer {layer}")]
    Divergence { layer: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no successfully trained model to select from")]
    SelectionFailed,

    #[error("sharpe ratio undefined for zero-variance series")]
    UndefinedSharpe,

    #[error("pathological higher moments: PSR variance term {0} is not positive")]
    PathologicalMoments(f64),

    #[error("at least 2 effective trials are required, got {0}")]
    InsufficientTrials(usize),

    #[error("validation refused: {0}")]
    ValidationRefused(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable machine-readable tag, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonPositivePrice { .. } => "non_positive_price",
            Error::InvalidSeries(_) => "invalid_series",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Alignment(_) => "alignment",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Divergence { .. } => "divergence",
            Error::InvalidConfig(_) => "invalid_config",
            Error::SelectionFailed => "selection_failed",
            Error::UndefinedSharpe => "undefined_sharpe",
            Error::PathologicalMoments(_) => "pathological_moments",
            Error::InsufficientTrials(_) => "insufficient_trials",
            Error::ValidationRefused(_) => "validation_refused",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Parse(_) => "parse",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
