use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Each variant maps to a stable machine-readable code (see [`Error::code`])
/// and to a process exit class (see [`Error::class`]) used by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("clip is empty or shorter than the requested number of parts")]
    EmptyClip,
    #[error("encoder command failed ({status}): {output}")]
    EncoderFailure { status: String, output: String },
    #[error("paired clips differ: {0}")]
    PairLengthMismatch(String),
    #[error("clip of {len} samples is shorter than the required {required}")]
    ClipTooShort { len: usize, required: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input of {frames}x{bins} is smaller than the {kernel}x{kernel} kernel")]
    ShapeTooSmall {
        frames: usize,
        bins: usize,
        kernel: usize,
    },
    #[error("forward cache does not match the model: {0}")]
    CacheMismatch(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("checksum mismatch or truncated file")]
    ChecksumMismatch,
    #[error("target tensor is constant; pixel loss is undefined")]
    ConstantTarget,
    #[error("input of {rows}x{cols} is smaller than the {window}x{window} window")]
    TooSmall {
        rows: usize,
        cols: usize,
        window: usize,
    },
    #[error("manifest has no training entries")]
    EmptyTrainSet,
    #[error("tensor contains non-finite values")]
    NonFiniteInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reference signal is silent")]
    SilentReference,
    #[error("signal too short: {0}")]
    TooShort(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("training loss became non-finite at step {step}")]
    Diverged { step: u64 },
}

/// Broad failure class, used to choose a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedWav(_) => "MalformedWav",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::EmptyClip => "EmptyClip",
            Error::EncoderFailure { .. } => "EncoderFailure",
            Error::PairLengthMismatch(_) => "PairLengthMismatch",
            Error::ClipTooShort { .. } => "ClipTooShort",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::ShapeTooSmall { .. } => "ShapeTooSmall",
            Error::CacheMismatch(_) => "CacheMismatch",
            Error::Io { .. } => "IoFailure",
            Error::BadMagic { .. } => "BadMagic",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::ChecksumMismatch => "ChecksumMismatch",
            Error::ConstantTarget => "ConstantTarget",
            Error::TooSmall { .. } => "TooSmall",
            Error::EmptyTrainSet => "EmptyTrainSet",
            Error::NonFiniteInput => "NonFiniteInput",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::SilentReference => "SilentReference",
            Error::TooShort(_) => "TooShort",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::MalformedManifest { .. } => "MalformedManifest",
            Error::Diverged { .. } => "Diverged",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) => ErrorClass::Usage,
            Error::CacheMismatch(_) => ErrorClass::Internal,
            _ => ErrorClass::Data,
        }
    }
}
