use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource budget exceeded: {0}")]
    Resource(String),

    #[error("measure is not admissible: {0}")]
    Admissibility(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("solver did not converge: {0}")]
    Solver(String),

    #[error("divergent restricted Green function: {0}")]
    Divergence(String),

    #[error("internal consistency failure: {0}")]
    Consistency(String),
}

impl Error {
    /// Coarse classification used by the experiment runner to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Admissibility(_) => ErrorKind::Config,
            Error::Resource(_) => ErrorKind::Resource,
            Error::Domain(_)
            | Error::Precondition(_)
            | Error::Solver(_)
            | Error::Divergence(_)
            | Error::Consistency(_) => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Resource,
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;
