use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IoError> = std::result::Result<T, E>;

/// Failures of file formats, configuration and orchestration.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:02x?}, found {found:02x?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("invalid UTF-8 in {0}")]
    Utf8(&'static str),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Core(#[from] dfpt_core::Error),
}

impl IoError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| IoError::Io { path, source }
    }

    /// Process exit code: 2 usage, 3 input mismatch, 4 runtime failure.
    pub fn exit_code(&self) -> i32 {
        use dfpt_core::Error as E;
        match self {
            IoError::Config { .. } | IoError::UnknownKey(_) => 2,
            IoError::Core(E::InvalidConfig(_) | E::NonPositiveTemperature(_) | E::InvalidRatio(_) | E::TooFewChannels { .. }) => 2,
            IoError::Core(
                E::ArchMismatch { .. }
                | E::DTypeMismatch { .. }
                | E::MissingParam(_)
                | E::UnexpectedParam(_)
                | E::ShapeMismatch { .. }
                | E::DatasetMismatch(_)
                | E::MethodMismatch { .. }
                | E::UnknownArch(_)
                | E::ChannelMismatch { .. }
                | E::DataLength { .. }
                | E::IndexOutOfRange { .. },
            ) => 3,
            IoError::Core(_) | IoError::Io { .. } => 4,
            _ => 3,
        }
    }
}
