use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("duplicate row for station '{station}' in year {year}")]
    DuplicateKey { station: String, year: i64 },

    #[error("non-positive or non-finite maximum {value} for station '{station}' in year {year}")]
    NonPositiveMaximum {
        station: String,
        year: i64,
        value: f64,
    },

    #[error("station '{0}' has maxima but no covariate row")]
    MissingCovariates(String),

    #[error("log transform of non-positive value {value} in covariate '{covariate}' (station '{station}')")]
    LogOfNonPositive {
        covariate: String,
        station: String,
        value: f64,
    },

    #[error("parse error in {path}, line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("config error at '{field}': {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Sampler(_) => 2,
            _ => 1,
        }
    }
}
