use thiserror::Error;

/// Errors raised anywhere in the HALO stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("data length {len} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0} has zero norm")]
    ZeroNorm(&'static str),

    #[error("index {index} out of range for {axis} of length {len}")]
    IndexOutOfRange {
        axis: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid outlier profile: {0}")]
    InvalidProfile(String),

    #[error("unsupported Hadamard dimension {0}: expected 2^n, 12*2^n or 20*2^n")]
    UnsupportedDim(usize),

    #[error("invalid scale {value} for group {group}")]
    InvalidScale { group: usize, value: f32 },

    #[error("expected {expected} scales, got {got}")]
    ScaleCount { expected: usize, got: usize },

    #[error("granularity {granularity} is not usable with format {format}")]
    IncompatibleGranularity { format: String, granularity: String },

    #[error("bad magic: not a tensor file")]
    BadMagic,

    #[error("unsupported tensor file version {0}")]
    VersionMismatch(u32),

    #[error("malformed tensor header: {0}")]
    BadHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("batch dimension {0} is not Hadamard-supported and padding is disabled")]
    UnpaddableBatch(usize),

    #[error("saved context does not match this backward call: {0}")]
    ContextMismatch(String),

    #[error("nothing to export: {0}")]
    NothingToExport(&'static str),

    #[error("training diverged at step {step}: loss {loss:e}")]
    Diverged { step: usize, loss: f64 },

    #[error("stale quantization scales: saved {saved}, weights now need {current}")]
    StaleScales { saved: f32, current: f32 },

    #[error("missing saved scales for backward regather")]
    MissingScales,

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
