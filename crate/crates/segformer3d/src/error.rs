//! Error type shared across the crate.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    ShapeMismatch(String),
    /// `backward` called on a tensor that is not a scalar.
    NotScalar(Vec<usize>),
    /// `backward` called on a tensor with no tape behind it.
    DisconnectedTape,
    /// `backward` called twice on the same tensor.
    BackwardTwice,
    /// Attention sequence length not divisible by the reduction ratio.
    ReductionIndivisible { len: usize, reduction: usize },
    /// Input spatial extent not divisible by the required factor.
    IndivisibleExtent { extent: usize, required: usize },
    /// Segmentation label outside [0, num_classes).
    LabelOutOfRange { label: usize, classes: usize },
    /// Training loss became NaN or infinite.
    NonFiniteLoss { step: usize, loss: f32 },
    /// Malformed volume file (bad magic, truncation, size mismatch).
    Format(String),
    /// Invalid configuration value or unknown key.
    Config(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NotScalar(shape) => {
                write!(f, "backward requires a scalar, got shape {shape:?}")
            }
            Error::DisconnectedTape => {
                write!(f, "backward called on a tensor with no autodiff tape")
            }
            Error::BackwardTwice => write!(f, "backward called twice on the same tensor"),
            Error::ReductionIndivisible { len, reduction } => {
                write!(f, "sequence length {len} not divisible by reduction ratio {reduction}")
            }
            Error::IndivisibleExtent { extent, required } => {
                write!(f, "spatial extent {extent} not divisible by {required}")
            }
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::NonFiniteLoss { step, loss } => {
                write!(f, "non-finite loss {loss} at step {step}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
