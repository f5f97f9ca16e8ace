use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading or validating a feature-store file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"SAFF\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("file truncated while reading {what}")]
    Truncated { what: String },
    #[error("record {record}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange {
        record: u64,
        label: u32,
        n_classes: u32,
    },
    #[error("class name {index} is not valid UTF-8")]
    InvalidClassName { index: u32 },
    #[error("record {record}: non-finite value")]
    NonFinite { record: u64 },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("split metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{0}")]
    Usage(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("configuration: {0}")]
    Config(String),
    #[error("statistical test undefined: {0}")]
    UndefinedTest(String),
    #[error("unknown image id {id} (store has {len} images)")]
    UnknownImage { id: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Short category tag used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Usage(_) => "usage",
            Error::NonFinite { .. } | Error::Divergence { .. } => "numeric",
            Error::Format(_) => "format",
            Error::InsufficientData(_) | Error::UnknownImage { .. } => "data",
            Error::Config(_) => "config",
            Error::UndefinedTest(_) => "stats",
            Error::Io(_) | Error::Json(_) => "io",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "format" => 4,
            "data" => 5,
            "numeric" => 6,
            "dimension" => 7,
            "stats" => 8,
            _ => 9,
        }
    }
}
