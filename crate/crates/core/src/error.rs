use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input spec mismatch: {0}")]
    InputSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate embedding: row {row} has zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("unsupported objective: {0}")]
    UnsupportedObjective(String),

    #[error("attack config error: {0}")]
    AttackConfig(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint digest mismatch: header says {expected}, tensors hash to {actual}")]
    CheckpointDigest { expected: String, actual: String },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error(
        "training collapsed at step {step}: embedding std stayed below {threshold} for {window} consecutive steps (last std {last_std:.3e})"
    )]
    Collapse {
        step: usize,
        threshold: f64,
        window: usize,
        last_std: f64,
    },

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
