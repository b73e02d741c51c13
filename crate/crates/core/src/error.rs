use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MakdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MakdError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate attention row {row}: every position is masked")]
    DegenerateRow { row: usize },

    #[error("svd did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("rank {rank} out of range for {role} ({rows}x{cols}); expected 1..={max}")]
    Rank { role: String, rank: usize, rows: usize, cols: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("malformed checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MakdError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MakdError::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MakdError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MakdError::Io { path: path.into(), source }
    }

    /// Short machine-parseable category used on the command line.
    pub fn category(&self) -> &'static str {
        match self {
            MakdError::Shape { .. } => "shape",
            MakdError::Invalid(_) => "invalid-argument",
            MakdError::Config(_) => "config",
            MakdError::DegenerateRow { .. } => "degenerate-attention",
            MakdError::NoConvergence { .. } => "no-convergence",
            MakdError::Rank { .. } => "rank",
            MakdError::NonFinite(_) => "non-finite",
            MakdError::Architecture(_) => "architecture",
            MakdError::Checkpoint { .. } => "checkpoint",
            MakdError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing-file",
            MakdError::Io { .. } => "io",
        }
    }
}
