use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown IPA segment {0:?}")]
    UnknownSegment(String),

    #[error("undefined similarity: both phonetic strings are empty")]
    UndefinedSimilarity,

    #[error("invalid edit costs: {0}")]
    InvalidCosts(String),

    #[error("malformed {what} table at line {line}: {message}")]
    Table {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("empty gazetteer")]
    EmptyGazetteer,

    #[error("empty phonetic query")]
    EmptyQuery,

    #[error("k must be at least 1")]
    ZeroK,

    #[error("index file: {0}")]
    IndexFormat(String),

    #[error("{path}: line {line}: {message}")]
    Data {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("span [{start}, {end}) out of range for {words} words")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        words: usize,
    },

    #[error("option overflow: {0} candidates exceed the 26 option letters")]
    OptionOverflow(usize),

    #[error("no candidates to build options from")]
    NoOptions,

    #[error("cloze sentence must contain exactly one [BLANK]")]
    BadCloze,

    #[error("could not parse answer: {0}")]
    AnswerParse(String),

    #[error("answer letter {0} is not among the options")]
    InvalidOption(char),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("tagger endpoint {endpoint}: {cause}")]
    Tagger { endpoint: String, cause: String },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("run and dataset ids differ; missing from run: {missing:?}, unknown in run: {extra:?}")]
    MismatchedIds {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("invalid filter spec: {0}")]
    FilterSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures raised by generation backends.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{endpoint}: request timed out")]
    Timeout { endpoint: String },

    #[error("{endpoint}: HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },

    #[error("{endpoint}: {message}")]
    Connection { endpoint: String, message: String },

    #[error("{endpoint}: malformed response: {message}")]
    MalformedBody { endpoint: String, message: String },

    #[error("credential variable {0} is not set")]
    MissingCredential(String),

    #[error("no scripted reply for key {0:?}")]
    MissingTranscript(String),

    #[error("backend cannot answer this request: {0}")]
    Unsupported(String),
}

impl BackendError {
    /// Whether a retry has a chance of succeeding.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout { .. } | BackendError::Connection { .. } => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}
