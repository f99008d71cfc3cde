use thiserror::Error;

/// Errors raised by the library.
///
/// The variants map onto the CLI exit codes: configuration and contract
/// violations are `Validation`, anything that went wrong while computing
/// is `Numerical`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("inputs are not coupled: {0}")]
    Uncoupled(String),

    #[error("sweep point N={n} failed: {source}")]
    SweepPoint {
        n: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures caused by bad input rather than by the computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_) | Error::Uncoupled(_) | Error::Config(_) => true,
            Error::SweepPoint { source, .. } => source.is_validation(),
            Error::Numerical(_) | Error::Io(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
