//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by network construction, propagation, training, and I/O.
#[derive(Debug, Error)]
pub enum CureError {
    /// Input or intermediate tensor shape does not match what a layer expects.
    #[error("shape mismatch at layer {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        got: String,
    },

    /// Class index out of range for the network's classification head.
    #[error("class index {index} out of range for {num_classes} classes")]
    InvalidClass { index: usize, num_classes: usize },

    /// Propagated values overflowed or became NaN.
    #[error("non-finite value at layer {layer} ({context})")]
    NonFinite { layer: usize, context: String },

    /// A network operation required a layer kind that is not present.
    #[error("unsupported network structure: {0}")]
    UnsupportedStructure(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("bad checkpoint magic (expected \"CUREckpt\")")]
    BadMagic,

    /// Checkpoint version not supported by this build.
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),

    /// Checkpoint payload failed its CRC-32 integrity check.
    #[error("checkpoint CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch { stored: u32, computed: u32 },

    /// File ended before the declared payload was read.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Malformed checkpoint or dataset header.
    #[error("malformed header: {0}")]
    HeaderParse(String),

    /// Dataset file has an unexpected magic number.
    #[error("bad IDX magic {got:#010x} in {path} (expected {expected:#010x})")]
    IdxMagic {
        path: String,
        got: u32,
        expected: u32,
    },

    /// Image and label files disagree on the sample count.
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// Dataset dimensions differ from what the caller required.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Invalid configuration key, value, or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Architecture of a loaded checkpoint does not match the expected one.
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    /// Training aborted due to a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CureError>;
