//! Error type shared by every module of the simulator.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    /// Invalid configuration or inconsistent dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// A shape mismatch discovered while running a network.
    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    /// An operation was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed input file.
    #[error("ingestion error in {path} at byte offset {offset}: {detail}")]
    Ingest {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Federation protocol violation (for example mismatched packet shapes).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite numbers where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    /// Wraps a failure with the round and phase of the experiment loop.
    #[error("round {round}, phase {phase}: {source}")]
    Experiment {
        round: usize,
        phase: &'static str,
        #[source]
        source: Box<FedError>,
    },
}

impl FedError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(self, round: usize, phase: &'static str) -> Self {
        FedError::Experiment {
            round,
            phase,
            source: Box::new(self),
        }
    }

    /// True for errors caused by configuration rather than by a failing run.
    pub fn is_config(&self) -> bool {
        match self {
            FedError::Config(_) => true,
            FedError::Experiment { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
