//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not conform for the attempted operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A dimension that must be >= 2 (layer norm rows) was 1.
    DegenerateDimension { op: &'static str, dim: usize },
    /// conv2d only supports odd kernel sizes.
    UnsupportedKernel { kh: usize, kw: usize },
    /// backward was called on a non-scalar tensor.
    NonScalarLoss { numel: usize },
    /// grad_check was handed an invalid finite-difference step.
    InvalidStep { step: f64 },
    /// Two forward evaluations of the same function disagreed.
    NonDeterministic { first: f64, second: f64 },
    /// Invalid model or training configuration.
    Config(String),
    /// Vocabulary construction or token lookup failure.
    Vocabulary(String),
    /// Caption longer than the sequence budget allows.
    CaptionTooLong { words: usize, max_len: usize },
    /// Metric inputs violate the corpus contract.
    Metrics(String),
    /// File format violation (bad magic, truncated payload, ...).
    Parse(String),
    /// Underlying I/O failure, with the path that caused it.
    Io { path: String, message: String },
    /// A NaN or infinity surfaced where finite values are required.
    Numeric(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. }
            | Error::DegenerateDimension { .. }
            | Error::UnsupportedKernel { .. }
            | Error::NonScalarLoss { .. }
            | Error::InvalidStep { .. }
            | Error::Config(_) => 2,
            Error::Vocabulary(_)
            | Error::CaptionTooLong { .. }
            | Error::Metrics(_)
            | Error::Parse(_)
            | Error::Io { .. } => 3,
            Error::NonDeterministic { .. } | Error::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch, lhs={lhs:?} rhs={rhs:?}")
            }
            Error::DegenerateDimension { op, dim } => {
                write!(f, "{op}: degenerate dimension {dim}, need at least 2")
            }
            Error::UnsupportedKernel { kh, kw } => {
                write!(f, "conv2d: unsupported even kernel size {kh}x{kw}")
            }
            Error::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::InvalidStep { step } => {
                write!(f, "grad_check: step must be positive and finite, got {step}")
            }
            Error::NonDeterministic { first, second } => write!(
                f,
                "grad_check: function is not deterministic ({first} vs {second})"
            ),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Vocabulary(msg) => write!(f, "vocabulary error: {msg}"),
            Error::CaptionTooLong { words, max_len } => write!(
                f,
                "caption of {words} words does not fit max length {max_len} (need words + 2 <= max)"
            ),
            Error::Metrics(msg) => write!(f, "metrics error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io { path, message } => write!(f, "io error on {path}: {message}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
