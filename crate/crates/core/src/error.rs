use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("softmax row {row} has every entry masked")]
    AllMasked { row: usize },

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("checksum mismatch in sample {index}")]
    Checksum { index: usize },

    #[error("view count mismatch: model expects {expected}, got {found}")]
    ViewCount { expected: usize, found: usize },

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("no foreground pixels")]
    EmptyForeground,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Broad class of the failure, used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } => ErrorKind::Numeric,
            Error::Io(_)
            | Error::Image(_)
            | Error::Format { .. }
            | Error::Version { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. } => ErrorKind::Io,
            _ => ErrorKind::Config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}
