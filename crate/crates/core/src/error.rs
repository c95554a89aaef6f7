use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance not positive definite{0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stale tape: recorded for parameter version {tape}, network is at {current}")]
    StaleTape { tape: u64, current: u64 },

    #[error("{stage} failed (config {fingerprint}): {source}")]
    Stage {
        stage: String,
        fingerprint: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn not_pd(context: impl std::fmt::Display) -> Self {
        Error::NotPositiveDefinite(format!(" ({context})"))
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Csv(_) | Error::DimensionMismatch { .. } => 3,
            Error::NotPositiveDefinite(_) | Error::Numerical(_) | Error::StaleTape { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
