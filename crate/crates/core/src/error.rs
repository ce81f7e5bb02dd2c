use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload in {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("unknown id `{0}`")]
    Lookup(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
