use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("axis {axis} is invalid for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("convolution output extent is degenerate for input {input:?}")]
    DegenerateOutput { input: Vec<usize> },
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("init scheme {scheme} is incompatible with shape {shape:?}")]
    InitShape { scheme: &'static str, shape: Vec<usize> },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("target class holds all probability mass; non-target distribution undefined")]
    DegenerateNonTarget,
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite loss `{what}` at epoch {epoch}, step {step}: {state}")]
    NonFiniteLoss {
        what: &'static str,
        epoch: usize,
        step: usize,
        state: String,
    },
    #[error("method {method} cannot run with this teacher wrapper: {reason}")]
    MethodMismatch { method: &'static str, reason: String },
    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),
    #[error("checkpoint holds architecture `{got}`, expected `{expected}`")]
    ArchMismatch { expected: String, got: String },
    #[error("parameter `{name}` stored as {got:?}, expected {expected:?}")]
    DTypeMismatch {
        name: String,
        expected: crate::tensor::DType,
        got: crate::tensor::DType,
    },
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("invalid ratio: {0}")]
    InvalidRatio(String),
    #[error("too few channels: {channels} channels with r1 = {r1}, r2 = {r2} leave no convolved channel")]
    TooFewChannels { channels: usize, r1: usize, r2: f64 },
}
