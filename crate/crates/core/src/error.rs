use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("unknown {field} value {value:?}")]
    UnknownEnum { field: &'static str, value: String },

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("no usable records")]
    NoUsableRecords,

    #[error("non-finite entry at (row {row}, col {col})")]
    NonFinite { row: usize, col: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("undefined correlation: zero variance")]
    UndefinedCorrelation,

    #[error("rank-deficient design matrix")]
    RankDeficient,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateId(_) => "duplicate_id",
            Error::UnknownEnum { .. } => "unknown_enum",
            Error::UnknownTask(_) => "unknown_task",
            Error::MissingIds(_) => "missing_ids",
            Error::NoUsableRecords => "no_usable_records",
            Error::NonFinite { .. } => "non_finite",
            Error::Format(_) => "format",
            Error::UndefinedCorrelation => "undefined_correlation",
            Error::RankDeficient => "rank_deficient",
            Error::Degenerate(_) => "degenerate",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
        }
    }
}
