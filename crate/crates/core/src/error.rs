use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate segment {0}: no moving time")]
    DegenerateSegment(String),

    #[error("underdetermined fit: {n} segments for {k} coefficients")]
    Underdetermined { n: usize, k: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("factorization diverged at epoch {epoch} (objective {objective:e}); try a smaller learning rate")]
    Divergence { epoch: usize, objective: f64 },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("rank deficient design: {0}")]
    Rank(String),

    #[error("donor {donor} has no observation on segment {segment}")]
    MissingDonor { donor: String, segment: String },

    #[error("no trained model for {0}")]
    Untrained(String),

    #[error("no approach source covers any route segment")]
    EmptyCoverage,

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
            Error::Argument(_) => ErrorKind::Validation,
            Error::Underdetermined { .. }
            | Error::Numeric(_)
            | Error::Divergence { .. }
            | Error::Rank(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
