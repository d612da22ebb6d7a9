use std::path::PathBuf;

/// Errors produced by the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column '{column}': cannot parse '{value}' as a finite number")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("column '{0}' selected more than once")]
    DuplicateColumn(String),
    #[error("column '{0}' has zero variance")]
    ConstantColumn(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("fit failed at {context}: {source}")]
    Fit {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn with_context(self, context: impl Into<String>) -> Self {
        Error::Fit {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
