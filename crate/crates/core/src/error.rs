use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-canonical residue '{ch}' at position {pos}")]
    NonCanonical { ch: char, pos: usize },

    #[error("sequence length {len} outside 1..={max}")]
    Length { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("query row {0} has no attendable keys")]
    AllKeysMasked(usize),

    #[error("insufficient sample: {got} positions, need at least {need}")]
    InsufficientSample { got: usize, need: usize },

    #[error("loss weights sum to zero")]
    ZeroWeight,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("time {t} outside {range}")]
    TimeRange { t: f64, range: &'static str },

    #[error("score is singular at t = 0; use the score representation instead")]
    SingularScore,

    #[error(
        "non-finite loss at step {step}: total={total}, reconstruction={reconstruction}, normalization={normalization}"
    )]
    Divergence {
        step: u64,
        total: f64,
        reconstruction: f64,
        normalization: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
