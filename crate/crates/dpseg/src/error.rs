//! Crate-wide error type.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A synthetic case cannot be generated for the named category.
    #[error("generation failed for category '{category}': {reason}")]
    Generation { category: String, reason: String },

    /// Structural shape/width mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Mathematical domain violation (e.g. non-positive temperature).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid input payload (empty strings, non-normalized rows, ...).
    #[error("input error: {0}")]
    Input(String),

    /// No eligible prompt entry for the named category.
    #[error("prompt sampling failed for category '{category}': {reason}")]
    Sampling { category: String, reason: String },

    /// Configuration inconsistency (dangling links, bad flags, bad files).
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value appeared in the named component.
    #[error("numeric error in {component}: non-finite value")]
    Numeric { component: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Checkpoint(#[from] dpseg_tensor::checkpoint::CheckpointError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numeric aborts, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric { .. } => 3,
            _ => 1,
        }
    }
}
