use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grammar parameters: {0}")]
    InvalidParams(String),
    #[error("unambiguous rules impossible: m*v = {needed} exceeds v^s = {available}")]
    Ambiguous { needed: u64, available: u64 },
    #[error("requested {requested} distinct strings but the grammar generates only {available}")]
    NotEnoughData { requested: usize, available: String },
    #[error("grammar generates {count} strings, above the enumeration limit {limit}")]
    EnumerationTooLarge { count: String, limit: usize },
    #[error("dataset contains a duplicate string")]
    DuplicateItem,
    #[error("sequence length {got} does not match d = {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("noise rate {0} outside [0, 1]")]
    InvalidBeta(f64),
    #[error("time step {t} outside [{min}, {max}]")]
    TimeOutOfRange { t: usize, min: usize, max: usize },
    #[error("transition is impossible under the forward process (zero normalizer)")]
    ImpossibleTransition,
    #[error("evidence has zero total mass")]
    ImpossibleEvidence,
    #[error("probability vector does not sum to one (sum = {0})")]
    NotNormalized(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty reference set")]
    EmptyReference,
    #[error("need at least {needed} reference points, got {got}")]
    TooFewReferences { needed: usize, got: usize },
    #[error("training diverged at step {tau}: loss {loss}")]
    Diverged { tau: u64, loss: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
