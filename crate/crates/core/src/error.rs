use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    DimensionMismatch { expected: usize, found: usize },
    ZeroVector,
    EmptyBatch,
    UnknownClass(u32),
    /// Gradient or parameter that is NaN or infinite, with the layer index.
    NonFiniteGradient { layer: usize },
    NonFiniteLoss,
    ShapeMismatch(String),
    InvalidLabel(String),
    InvalidConfig(String),
    InsufficientSamples { what: String, required: usize, available: usize },
    /// A score set that lacks one of the two classes.
    OneClassScores,
    MissingPaiType(String),
    InvalidProtocol(String),
}

impl Error {
    /// Whether the error comes from a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss | Error::ZeroVector
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected length {expected}, found {found}")
            }
            Error::ZeroVector => f.write_str("cannot normalize a zero vector"),
            Error::EmptyBatch => f.write_str("empty batch"),
            Error::UnknownClass(id) => write!(f, "unknown class id {id}"),
            Error::NonFiniteGradient { layer } => {
                write!(f, "non-finite gradient in layer {layer}")
            }
            Error::NonFiniteLoss => f.write_str("loss diverged to a non-finite value"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidLabel(msg) => write!(f, "invalid label: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InsufficientSamples {
                what,
                required,
                available,
            } => write!(
                f,
                "not enough {what}: required {required}, available {available}"
            ),
            Error::OneClassScores => {
                f.write_str("score set needs at least one genuine and one attack entry")
            }
            Error::MissingPaiType(id) => write!(f, "attack entry {id} has no pai_type"),
            Error::InvalidProtocol(msg) => write!(f, "invalid protocol: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
