use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unmapped visual column {0}")]
    Mapping(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("capacity exceeded: requested {requested}, available {available}")]
    Capacity { requested: usize, available: usize },

    #[error("prompt template is missing the {0} placeholder")]
    Template(&'static str),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("backend error: {0}")]
    Backend(#[from] BackendError),

    #[error("greedy step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: BackendError,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("correlation undefined: constant input")]
    ConstantInput,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failure reported by a step backend.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("request {id}: {code}: {message}")]
    Remote { id: u64, code: String, message: String },

    #[error("request {id}: protocol error: {message}")]
    Protocol { id: u64, message: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("batch element {index}: {message}")]
    Batch { index: usize, message: String },

    #[error("invalid request: {0}")]
    Invalid(String),
}
