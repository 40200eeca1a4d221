//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// What went wrong while decoding an embedding file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    /// Leading magic bytes were not `LGDE`.
    BadMagic,
    /// Header declared a version this build does not understand.
    UnsupportedVersion(u16),
    /// Header declared an unknown dtype code.
    BadDtype(u8),
    /// File ended before the declared payload and checksum.
    Truncated,
    /// Payload checksum did not match the trailer.
    ChecksumMismatch { expected: u32, found: u32 },
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BadMagic => write!(f, "bad magic (expected LGDE)"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            Self::BadDtype(d) => write!(f, "unknown dtype code {d}"),
            Self::Truncated => write!(f, "file truncated"),
            Self::ChecksumMismatch { expected, found } => {
                write!(f, "payload CRC mismatch (expected {expected:#010x}, found {found:#010x})")
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("non-finite input to {op} at row {row}, col {col}")]
    NonFiniteInput {
        op: &'static str,
        row: usize,
        col: usize,
    },

    #[error("{op}: row {row} has (near-)zero norm")]
    ZeroNormRow { op: &'static str, row: usize },

    #[error("assignment {value} at position {index} out of range for {categories} categories")]
    AssignmentOutOfRange {
        index: usize,
        value: usize,
        categories: usize,
    },

    #[error("unknown category name(s): {}", names.join(", "))]
    UnknownCategories { names: Vec<String> },

    #[error("duplicate category name: {name}")]
    DuplicateName { name: String },

    #[error("{what} count mismatch: {left} vs {right}")]
    CountMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training aborted at step {step}: {message}")]
    TrainingAbort {
        step: u64,
        message: String,
        /// Score distributions captured at the failing step, for post-mortems.
        diagnostics: Box<crate::losses::DiagnosticSnapshot>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatErrorKind },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, kind: FormatErrorKind) -> Self {
        Error::Format {
            path: path.into(),
            kind,
        }
    }
}
