use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unrecognized format: {0}")]
    UnrecognizedFormat(String),

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload for utterance '{0}'")]
    TruncatedPayload(String),

    #[error("inconsistent dimension: expected {expected}, found {found}")]
    InconsistentDimension { expected: usize, found: usize },

    #[error("duplicate utterance id '{0}'")]
    DuplicateUtterance(String),

    #[error("non-finite value in '{0}'")]
    NonFinite(String),

    #[error("unknown utterance '{0}'")]
    UnknownUtterance(String),

    #[error("segment exceeds utterance '{utt_id}': [{start}, {end}) with {len} frames")]
    SegmentOutOfRange {
        utt_id: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no positive pairs")]
    NoPositivePairs,

    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch})")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the error stems from bad user input rather than an internal fault.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
