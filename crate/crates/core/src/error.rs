use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mode {mode} out of range for a tensor of order {order}")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("singular Gram matrix while updating mode {mode}")]
    Singular { mode: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("objective became non-finite at sweep {sweep}")]
    Divergence { sweep: usize },

    #[error("factor for mode {mode} is identically zero; scale is undefined")]
    ZeroFactor { mode: usize },

    #[error("zero total variation in the outcome")]
    ZeroVariation,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("chain {chain} failed at iteration {iteration}: {source}")]
    Sampler {
        chain: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Parse,
    Numerical,
    Sampler,
    Usage,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::Parse { .. } | Error::Format(_) => ErrorKind::Parse,
            Error::Singular { .. }
            | Error::NotPositiveDefinite(_)
            | Error::Divergence { .. }
            | Error::ZeroFactor { .. }
            | Error::ZeroVariation => ErrorKind::Numerical,
            Error::Sampler { .. } => ErrorKind::Sampler,
            Error::Shape(_) | Error::ModeOutOfRange { .. } | Error::InvalidArgument(_) => {
                ErrorKind::Usage
            }
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
