use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EnnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EnnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("non-finite risk at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("malformed number {value:?} at row {row}, column {column}")]
    MalformedNumber {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid SNP value {value:?} in column {column} (row {row}); expected 0, 1, 2 or NA")]
    InvalidSnp {
        row: usize,
        column: String,
        value: String,
    },

    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("missing value in covariate column {column} (row {row})")]
    MissingCovariate { row: usize, column: String },

    #[error("need at least 5 samples for a 3:1:1 split, got {0}")]
    TooFewSamples(usize),

    #[error("design matrix is rank deficient; use lambda > 0")]
    RankDeficient,

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<EnnError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EnnError {
    /// Short machine-readable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            EnnError::DimensionMismatch { .. } => "dimension",
            EnnError::Config(_) => "config",
            EnnError::EmptyDataset(_) | EnnError::TooFewSamples(_) => "data",
            EnnError::NonFinite { .. } | EnnError::RankDeficient => "numerical",
            EnnError::MalformedNumber { .. }
            | EnnError::InvalidSnp { .. }
            | EnnError::DuplicateColumn(_)
            | EnnError::MissingColumn(_)
            | EnnError::MissingCovariate { .. }
            | EnnError::Csv(_) => "parse",
            EnnError::Json(_) => "json",
            EnnError::Io { .. } => "io",
            EnnError::Context { source, .. } => source.category(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        EnnError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EnnError::Io {
            path: path.into(),
            source,
        }
    }
}
