use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("kernel of length {kernel} does not fit input of length {len}")]
    KernelTooLarge { kernel: usize, len: usize },

    #[error("loss has no recorded provenance on this tape")]
    NotAttached,

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    InvalidId { id: usize, size: usize },

    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,

    #[error("unknown modality kind `{0}`")]
    UnknownKind(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated: {0}")]
    TruncatedFile(String),

    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),

    #[error("feature length {len} is shorter than the target length {target}")]
    BadLength { len: usize, target: usize },

    #[error("instruction text is required")]
    MissingText,

    #[error("sequence of length {len} exceeds the maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence has no response span")]
    NoResponseSpan,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("caption `{0}` is empty")]
    EmptyCaption(String),

    #[error("no Q:/A: pairs found in completion")]
    NoPairsFound,

    #[error("generation client error: {0}")]
    ClientError(String),

    #[error("source `{source_name}` has {available} examples, {requested} requested")]
    SourceTooSmall {
        source_name: String,
        available: usize,
        requested: usize,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("invalid data in {location}: {message}")]
    InvalidData { location: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
