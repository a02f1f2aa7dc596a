use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, arities or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible action: {0}")]
    Feasibility(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown vocabulary token: {0}")]
    Vocabulary(String),

    #[error("missing upstream artifact {}", .0.display())]
    Staging(PathBuf),

    #[error("provenance mismatch for {file}: expected {expected}, found {found}")]
    Provenance {
        file: String,
        expected: String,
        found: String,
    },

    #[error("unreadable or incompatible artifact {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Vocabulary(_) => 2,
            Error::Staging(_) | Error::Provenance { .. } | Error::Format { .. } => 3,
            Error::Numerical(_) | Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
