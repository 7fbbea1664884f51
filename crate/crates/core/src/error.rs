use std::path::PathBuf;

/// Errors surfaced by every stage of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("range error: {0}")]
    Range(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("signal too short: need more than {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("degenerate montage: {0}")]
    DegenerateMontage(String),

    #[error("correlation undefined for constant input")]
    UndefinedCorrelation,

    #[error("DTW band of radius {radius} admits no path for lengths {n} and {m}")]
    InfeasibleBand { radius: usize, n: usize, m: usize },

    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("stage `{stage}` requires `{prerequisite}` to be run first ({detail})")]
    StageOrder {
        stage: &'static str,
        prerequisite: &'static str,
        detail: String,
    },

    #[error("stale input {path}: recorded digest {expected}, found {found}")]
    StaleInput {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}
