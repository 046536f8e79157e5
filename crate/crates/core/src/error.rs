use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller-supplied value violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),
    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The operation is not valid in the current state.
    #[error("state error: {0}")]
    State(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
