use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// Each variant maps onto a stable numeric code (see [`Error::code`]) that the
/// CLI prints in its structured error records and the C ABI returns.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("range error: {0}")]
    Range(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("malformed block: {0}")]
    MalformedBlock(String),

    #[error("archive {path}: missing entry `{entry}`")]
    MissingEntry { path: PathBuf, entry: String },

    #[error("archive {path}: entry `{entry}` has shape {found:?}, manifest declares {expected:?}")]
    ShapeMismatch {
        path: PathBuf,
        entry: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("digest mismatch for `{name}`: expected {expected}, found {found}")]
    DigestMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("archive format: {0}")]
    Format(String),

    #[error("empty trace: {0}")]
    EmptyTrace(String),

    #[error("undefined coverage: {0}")]
    UndefinedCoverage(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("emission error: {0}")]
    Emission(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("stitch error: {0}")]
    Stitch(String),

    #[error("patch error: {0}")]
    Patch(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("zip: {0}")]
    Zip(#[from] zip::result::ZipError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable numeric code, shared by the CLI error records and the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Dimension(_) => 10,
            Error::NonFinite { .. } => 11,
            Error::DegenerateRow { .. } => 12,
            Error::Range(_) => 13,
            Error::Config(_) => 20,
            Error::Trace(_) => 21,
            Error::MalformedBlock(_) => 22,
            Error::MissingEntry { .. } => 30,
            Error::ShapeMismatch { .. } => 31,
            Error::DigestMismatch { .. } => 32,
            Error::Format(_) => 33,
            Error::EmptyTrace(_) => 40,
            Error::UndefinedCoverage(_) => 41,
            Error::Encoding(_) => 50,
            Error::Emission(_) => 51,
            Error::Aggregation(_) => 52,
            Error::Stitch(_) => 60,
            Error::Patch(_) => 61,
            Error::Corpus(_) => 62,
            Error::Input(_) => 63,
            Error::Io { .. } => 70,
            Error::Json(_) => 71,
            Error::Zip(_) => 72,
        }
    }

    /// Short machine-readable kind string.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::Range(_) => "range",
            Error::Config(_) => "config",
            Error::Trace(_) => "trace",
            Error::MalformedBlock(_) => "malformed_block",
            Error::MissingEntry { .. } => "missing_entry",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Format(_) => "format",
            Error::EmptyTrace(_) => "empty_trace",
            Error::UndefinedCoverage(_) => "undefined_coverage",
            Error::Encoding(_) => "encoding",
            Error::Emission(_) => "emission",
            Error::Aggregation(_) => "aggregation",
            Error::Stitch(_) => "stitch",
            Error::Patch(_) => "patch",
            Error::Corpus(_) => "corpus",
            Error::Input(_) => "input",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Zip(_) => "zip",
        }
    }
}
