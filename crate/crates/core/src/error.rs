use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid visual field: {0}")]
    InvalidField(String),

    #[error("invalid series `{id}`: {reason}")]
    InvalidSeries { id: String, reason: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("observation prefix is empty")]
    EmptyPrefix,

    #[error("expert intercept has not been fit to a target")]
    InterceptNotFit,

    #[error("all aggregation weights are zero")]
    ZeroWeights,

    #[error("cohort of {found} patients is smaller than the {required} required")]
    CohortTooSmall { required: usize, found: usize },

    #[error("regret ledger is empty")]
    EmptyLedger,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed or invalid input data rather than
    /// a failure inside the pipeline.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::InvalidField(_)
                | Error::InvalidSeries { .. }
                | Error::Parse { .. }
                | Error::Config { .. }
                | Error::Json(_)
                | Error::CohortTooSmall { .. }
        )
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
