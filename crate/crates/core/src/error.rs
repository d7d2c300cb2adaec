use std::path::PathBuf;

use thiserror::Error;

use crate::domain::Stimulus;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid attribute value: {0}")]
    InvalidAttribute(String),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("stimulus {0} appears more than once")]
    DuplicateStimulus(Stimulus),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct FormatError {
    pub line: usize,
    pub message: String,
}

impl FormatError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("degenerate distance matrix: {0}")]
    DegenerateMatrix(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out after {0:.1}s")]
    Timeout(f64),
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("prompt needs ~{estimated} tokens, budget is {budget}")]
    ContextOverflow { estimated: usize, budget: usize },
    #[error("malformed service reply: {0}")]
    MalformedServiceReply(String),
    #[error("backend cannot {0}")]
    CapabilityUnsupported(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Errors worth retrying with backoff.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout(_)
                | BackendError::TransportFailure(_)
                | BackendError::MalformedServiceReply(_)
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unparseable response {0:?}")]
    UnparseableResponse(String),
    #[error("stimulus {0} missing from vocabulary")]
    StimulusMissing(Stimulus),
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("task {0} is not valid for this operation")]
    WrongTask(String),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("backend exhausted during {stage}: {source}")]
    BackendExhausted { stage: String, source: BackendError },
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("digest mismatch for {file}: manifest {expected}, found {actual}")]
    DigestMismatch { file: String, expected: String, actual: String },
    #[error("unsupported schema {0}")]
    UnsupportedSchema(String),
}

impl PersistError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PersistError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        PersistError::Parse { path: path.into(), message: message.into() }
    }
}
