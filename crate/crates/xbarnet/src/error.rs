use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in layer {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced at {0}")]
    NonFinite(String),

    #[error("training diverged (non-finite loss) at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("fault map mismatch: {0}")]
    FaultMap(String),

    #[error("parse error in {file} line {line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("missing checkpoint for {0}; pass --train-on-demand or train it first")]
    MissingCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
