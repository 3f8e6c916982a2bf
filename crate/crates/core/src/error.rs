use diffcore::DiffError;
use thiserror::Error;

/// Failures reading the binary dataset and checkpoint containers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum PassError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity error: {n} pinching antennas exceed the model ceiling of {n_max}")]
    Capacity { n: usize, n_max: usize },

    #[error("singular geometry: {0}")]
    Singularity(String),

    #[error("invalid switching schedule: {0}")]
    Schedule(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("record {index}: {source}")]
    RecordWrite {
        index: usize,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl PassError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            PassError::Config(_) => 2,
            PassError::Capacity { .. } => 3,
            PassError::Io { .. } | PassError::RecordWrite { .. } => 4,
            PassError::Format(FormatError::BadMagic { .. }) => 5,
            PassError::Format(FormatError::VersionMismatch { .. }) => 6,
            PassError::Format(FormatError::Truncated(_)) => 7,
            PassError::Format(FormatError::Malformed(_)) => 8,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        PassError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PassError>;
