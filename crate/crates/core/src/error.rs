//! Error types shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor operation received operands with incompatible shapes.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Tensor operation received a non-finite (NaN or infinite) input.
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    /// A caller violated an operation's contract (wrong mode, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset record failed to parse or validate.
    #[error("line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    /// A checkpoint does not match the requested configuration.
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    /// Aligned input files disagree on length.
    #[error("data misalignment: {0}")]
    Misaligned(String),

    /// Training aborted because a gradient became non-finite.
    #[error("non-finite gradient in parameter {0}")]
    BadGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
