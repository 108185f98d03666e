use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {what} = {index}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// The existence classification rules the equation out.
    #[error("no solution: {0}")]
    NoSolution(String),

    /// The classification does not certify a solution that can be built.
    #[error("refused: {0}")]
    Refused(String),

    #[error("singular kernel at t = {time}: {detail}")]
    Singularity { time: f64, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
