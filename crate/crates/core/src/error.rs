use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BiteError> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto coarse categories: configuration problems versus data problems.
#[derive(Debug, Error)]
pub enum BiteError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input too short: signal has {samples} samples but the STFT window needs {window}")]
    InputTooShort { samples: usize, window: usize },

    #[error("bad magic at byte offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {version} at byte offset {offset}")]
    UnsupportedVersion { offset: u64, version: u16 },

    #[error("truncated file at byte offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: u64,
        expected: u64,
        actual: u64,
    },

    #[error("label {label} at byte offset {offset} is out of range for {n_classes} classes")]
    LabelOutOfRange {
        offset: u64,
        label: usize,
        n_classes: usize,
    },

    #[error("malformed data at byte offset {offset}: {reason}")]
    Malformed { offset: u64, reason: String },

    #[error("config mismatch on field `{field}`: archive has {archived}, expected {expected}")]
    ConfigMismatch {
        field: String,
        archived: String,
        expected: String,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BiteError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        BiteError::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        BiteError::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BiteError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the contents or availability of input data
    /// rather than by the requested configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            BiteError::BadMagic { .. }
                | BiteError::UnsupportedVersion { .. }
                | BiteError::Truncated { .. }
                | BiteError::LabelOutOfRange { .. }
                | BiteError::Malformed { .. }
                | BiteError::Io { .. }
        )
    }
}
