use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("insufficient data: {samples} samples, need more than {required}")]
    InsufficientData { samples: usize, required: usize },

    #[error("input {block} is not persistently exciting (reciprocal condition {rcond:.3e})")]
    Excitation { block: String, rcond: f64 },

    #[error("rank-deficient regression, deficient columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("weighted normal matrix is numerically singular (reciprocal condition {rcond:.3e})")]
    Conditioning { rcond: f64 },

    #[error("module {module} has an unstable denominator")]
    Unstable { module: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dimension(_) | Error::Parameter(_) | Error::Parse(_) => ErrorKind::Config,
            Error::InsufficientData { .. }
            | Error::Excitation { .. }
            | Error::RankDeficient { .. }
            | Error::Conditioning { .. }
            | Error::Unstable { .. } => ErrorKind::Numerical,
            Error::Io(_) => ErrorKind::Io,
            Error::Csv(e) => match e.kind() {
                csv::ErrorKind::Io(_) => ErrorKind::Io,
                _ => ErrorKind::Config,
            },
        }
    }
}
