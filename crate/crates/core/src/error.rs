use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: unknown tag `{tag}`")]
    UnknownTag { line: usize, tag: String },

    #[error("invalid label sequence at index {index}: {msg}")]
    InvalidSequence { index: usize, msg: String },

    #[error("overlapping spans: [{first_start}, {first_end}) and [{second_start}, {second_end})")]
    OverlappingSpans {
        first_start: usize,
        first_end: usize,
        second_start: usize,
        second_end: usize,
    },

    #[error("span [{start}, {end}) out of range for length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("empty constraint at position {position}")]
    EmptyConstraint { position: usize },

    #[error("no label path satisfies the constraint and transition mask")]
    Infeasible,

    #[error("state space too large for enumeration: {labels}^{len} paths")]
    StateSpaceTooLarge { labels: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dataset contains unknown labels; corruption requires fully annotated data")]
    NotGold,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "non-finite loss at epoch {epoch}, step {step} (lr {learning_rate}); try a lower learning rate"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        learning_rate: f64,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
