use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quantile level must lie in (0, 1), got {0}")]
    InvalidQuantile(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("design matrix is rank deficient (column {column} `{name}` is numerically dependent)")]
    RankDeficient { column: usize, name: String },

    #[error("{path}: row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumericCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("posterior precision for beta is not positive definite (latent range [{v_min:e}, {v_max:e}], sigma {sigma:e})")]
    NotPositiveDefinite { v_min: f64, v_max: f64, sigma: f64 },

    #[error("sweep {sweep}: {source}")]
    Sweep {
        sweep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("latent chain {0} has zero spread; kernel density estimate is undefined")]
    DegenerateChain(usize),

    #[error("simulation aborted: {failed} of {total} replications failed (first failure: {first})")]
    StudyAborted {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidQuantile(_) => "invalid_quantile",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InvalidData(_) => "invalid_data",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NonNumericCell { .. } => "non_numeric_cell",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::Sweep { .. } => "sampler_failure",
            Error::DegenerateChain(_) => "degenerate_chain",
            Error::StudyAborted { .. } => "study_aborted",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Json(_) => "json",
        }
    }
}
