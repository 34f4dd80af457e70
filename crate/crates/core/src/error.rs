use thiserror::Error;

/// Errors produced by quantization kernels, graph construction, training and
/// artifact persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("unsupported bit width {0}")]
    InvalidBits(u8),

    #[error("corrupt quantized tensor: {0}")]
    Corrupt(String),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),

    #[error("graph contains a cycle involving `{0}`")]
    Cycle(String),

    #[error("config is missing an assignment for weight node `{0}`")]
    MissingAssignment(String),

    #[error("config assigns non-weight node `{0}`")]
    NotAWeightNode(String),

    #[error("sampler could not produce {requested} distinct configs after {attempts} attempts")]
    SamplerExhausted { requested: usize, attempts: usize },

    #[error("rank loss needs at least two distinct target values")]
    DegenerateTargets,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed tensor dump: {0}")]
    BadDump(String),

    #[error("artifact schema version {got} unsupported, expected {expected}")]
    SchemaVersion { expected: u32, got: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;
