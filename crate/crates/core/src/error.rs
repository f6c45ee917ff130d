use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad format: {0}")]
    BadFormat(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch in {file}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        file: String,
        stored: u32,
        computed: u32,
    },

    #[error("dimension mismatch for {operand}: expected {expected}, got {actual}")]
    Dimension {
        operand: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("duplicate document id {0:?}")]
    DuplicateDoc(String),

    #[error("unknown document id {0:?}")]
    UnknownDoc(String),

    #[error("sparse retrieval requires exact-match build")]
    SparseRequiresExactMatch,

    #[error("uni mode is not enabled in these heads")]
    UniDisabled,

    #[error("degenerate study: {0}")]
    DegenerateStudy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite loss at step {step}: {details}")]
    NonFiniteLoss { step: usize, details: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
