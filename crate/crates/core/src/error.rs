use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("frame {frame} has zero energy; energy scaling is undefined there")]
    ZeroEnergyFrame { frame: usize },

    #[error("target energy at frame {frame} is {value}, must be finite and > 0")]
    InvalidEnergyTarget { frame: usize, value: f64 },

    #[error("invalid contour: {0}")]
    InvalidContour(String),

    #[error("invalid spectrogram: {0}")]
    InvalidSpectrogram(String),

    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("flow produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("registration diverged after {iterations} iterations")]
    Diverged { iterations: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("inconsistent network spec: {0}")]
    InconsistentSpec(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite evaluation at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("discriminator output {value} outside (0, 1)")]
    DiscriminatorOutputOutOfRange { value: f64 },

    #[error("non-finite loss at update {update} ({component})")]
    NonFiniteLoss { update: usize, component: String },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("empty history")]
    EmptyHistory,

    #[error("corpus has no ground-truth map")]
    MissingGroundTruth,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
