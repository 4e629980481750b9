//! Error types shared across the crate, one enum per subsystem.

use thiserror::Error;

/// Errors raised by the differentiable tensor engine.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward expects a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },
    #[error("gradient for parameter '{name}' was not cleared before backward")]
    GradientNotCleared { name: String },
    #[error("parameter store: {0}")]
    Params(String),
}

/// Errors raised while assembling or running the model graph.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Errors raised by the supervision (loss) layer.
#[derive(Debug, Error)]
pub enum LossError {
    #[error("ground-truth map has no pixels")]
    EmptyMap,
    #[error("loss shape mismatch: logits {logits} vs ground truth {gt}")]
    ShapeMismatch { logits: String, gt: String },
    #[error("invalid supervision config: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Errors raised by the checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checkpoint payload truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

/// Errors raised by the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("missing gradient for trainable parameter '{name}'")]
    MissingGradient { name: String },
    #[error("non-finite loss {value} at iteration {step} (batch items {batch:?})")]
    NonFiniteLoss {
        step: u64,
        value: f64,
        batch: Vec<usize>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised by dataset ingestion and augmentation.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("image error on {path}: {msg}")]
    Image { path: String, msg: String },
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("rotation by {angle_deg} deg leaves a degenerate crop ({w}x{h})")]
    DegenerateCrop { angle_deg: f64, w: usize, h: usize },
}

/// Errors raised by the boundary evaluator.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: prediction {pred} vs ground truth {gt}")]
    DimensionMismatch { pred: String, gt: String },
    #[error("prediction/ground-truth lists differ in length: {pred} vs {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("prediction values outside [0,1]: {0}")]
    BadPrediction(String),
    #[error("no image pairs to evaluate")]
    Empty,
    #[error("unmatched files:\n{0}")]
    MissingCounterparts(String),
    #[error("invalid evaluator config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}
