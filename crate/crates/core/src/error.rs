// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Architecture or run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data is malformed (non-finite values, labels out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Loss became non-finite during training.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("checkpoint: bad magic bytes {found:?}")]
    CheckpointMagic { found: [u8; 4] },

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: truncated blob ({context})")]
    TruncatedBlob { context: String },

    #[error("checkpoint: shape mismatch ({0})")]
    CheckpointShape(String),

    /// Invalid ablation specification or similarity-group request.
    #[error("ablation spec error: {0}")]
    Spec(String),

    /// Normalization of an all-zero filter is undefined.
    #[error("undefined normalization: {0} is all zero")]
    ZeroFilter(String),

    /// Two evaluation reports cannot be compared.
    #[error("report error: {0}")]
    Report(String),

    /// Rank test with zero variance (every value identical).
    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("statistics error: {0}")]
    Stats(String),

    /// Non-finite t-SNE gradient.
    #[error("t-SNE gradient became non-finite at iteration {iteration}")]
    Embedding { iteration: usize },

    #[error("IDX {path}: bad magic 0x{found:08x} (expected 0x{expected:08x})")]
    IdxMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("IDX {path}: truncated payload ({needed} bytes needed, {available} available)")]
    IdxTruncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },

    #[error("IDX {path}: unexpected dimensions {rows}x{cols} (expected 28x28)")]
    IdxDimensions { path: PathBuf, rows: u32, cols: u32 },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// A result file does not match its published schema.
    #[error("schema violation in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}
