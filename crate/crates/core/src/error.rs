//! Error types shared across the toolkit.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failures the toolkit can surface.
///
/// Every operation is total: any input either produces a value or one of
/// these variants, never a panic or a partially constructed object.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (bad magic, implausible header fields,
    /// broken sidecar files, ...).
    #[error("invalid data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// NIfTI datatype code we do not decode.
    #[error("unsupported NIfTI datatype code {code} in {path}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    /// Shape disagreement between arrays that must match.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Cross-modality or cross-file pairing failure.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// Input too small or otherwise outside an operation's domain.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Not enough samples for a statistical fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Non-finite values or a numerically meaningless request.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller-supplied parameter violates an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Bad run configuration (missing keys, unknown values, absent paths).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Failure inside a pluggable slice embedder, tagged with the slice.
    #[error("embedding failed on slice {index}: {reason}")]
    Embedding { index: usize, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable tag for each variant, used by the CLI's
    /// error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::UnsupportedDatatype { .. } => "unsupported-datatype",
            Error::Dimension(_) => "dimension",
            Error::Pairing(_) => "pairing",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Numeric(_) => "numeric",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Embedding { .. } => "embedding",
        }
    }
}
