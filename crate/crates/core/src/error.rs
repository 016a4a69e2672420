use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-deterministic objective: {0}")]
    Determinism(String),

    #[error("parse error at {}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },

    #[error("empty rationale returned for prompt of hop {0}")]
    EmptyRationale(String),

    #[error("too many failed requests: {0}")]
    TooManyFailures(String),

    #[error("missing feature `{field}` for meme {meme_id}")]
    MissingFeature { meme_id: String, field: String },

    #[error("data completeness error: {0}")]
    DataCompleteness(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
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

    /// Short machine-parsable class name, used by the CLI's one-line error output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::DegenerateVector(_) => "degenerate-vector",
            Error::NonFinite(_) => "non-finite",
            Error::Contract(_) => "contract",
            Error::Determinism(_) => "determinism",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Schema(_) => "schema",
            Error::Version(_) => "version",
            Error::Config(_) => "config",
            Error::Template(_) => "template",
            Error::Transport(_) => "transport",
            Error::Endpoint { .. } => "endpoint",
            Error::EmptyRationale(_) => "empty-rationale",
            Error::TooManyFailures(_) => "too-many-failures",
            Error::MissingFeature { .. } => "missing-feature",
            Error::DataCompleteness(_) => "data-completeness",
            Error::Io { .. } => "io",
        }
    }
}
