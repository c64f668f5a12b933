use std::fmt;

use prosody_morph::Error;

pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_VERIFY: i32 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new(EXIT_CONFIG, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::InvalidConfig(_)
        | Error::InvalidSpec(_)
        | Error::LengthMismatch { .. }
        | Error::ShapeMismatch(_)
        | Error::InconsistentSpec(_) => EXIT_CONFIG,
        Error::Diverged { .. } | Error::NonFiniteState { .. } => EXIT_DIVERGED,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteEvaluation { .. } => {
            EXIT_NON_FINITE
        }
        Error::ZeroEnergyFrame { .. }
        | Error::InvalidEnergyTarget { .. }
        | Error::InvalidContour(_)
        | Error::InvalidSpectrogram(_)
        | Error::Parse(_)
        | Error::MissingGroundTruth
        | Error::EmptyHistory
        | Error::DiscriminatorOutputOutOfRange { .. }
        | Error::TapeConsumed => EXIT_DATA,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::new(exit_code(&e), e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
