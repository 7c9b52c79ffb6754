use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("conv: {channels} channels not divisible by {groups} groups")]
    Groups { channels: usize, groups: usize },
    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("bce_with_logits: target {0} outside [0, 1]")]
    TargetRange(f64),
}
