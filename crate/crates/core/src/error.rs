use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("missing stick weight for edge {0}")]
    MissingEdgeWeight(String),

    #[error("malformed tree: {0}")]
    MalformedTree(String),

    #[error("corpus schema violation at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("corpus has no labels; node labelling requires at least one labelled element")]
    MissingLabels,

    #[error("checkpoint schema version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad inputs: files, schemas, configuration, malformed structures.
    Input,
    /// Numerical failure during computation (divergence, non-finite values).
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Numerical(_) => ErrorKind::Numerical,
            _ => ErrorKind::Input,
        }
    }
}
