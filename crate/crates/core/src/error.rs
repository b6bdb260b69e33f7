use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands whose shapes must agree do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single tensor has a shape the operation cannot accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    /// Backward was started from a tensor that is not a scalar.
    NonScalarLoss(Vec<usize>),
    /// A registered parameter reached the optimizer without a gradient.
    MissingGrad(String),
    /// A label tensor held something other than 0 or 1.
    NonBinary { op: &'static str, value: f64 },
    /// Image too small for the requested multi-scale structural similarity.
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    InvalidConfig(String),
    ArityMismatch { expected: usize, got: usize },
    /// Malformed binary payload (tensor file or checkpoint).
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::BadShape { op, shape, reason } => {
                write!(f, "{op}: unsupported shape {shape:?}: {reason}")
            }
            Error::NonScalarLoss(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::MissingGrad(name) => write!(f, "parameter `{name}` has no gradient"),
            Error::NonBinary { op, value } => {
                write!(f, "{op}: expected binary labels, found {value}")
            }
            Error::ImageTooSmall { height, width, min } => write!(
                f,
                "image {height}x{width} too small for multi-scale SSIM, need at least {min}x{min}"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::ArityMismatch { expected, got } => {
                write!(f, "model expects {expected} frame(s), got {got}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
