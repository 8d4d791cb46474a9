use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12 (row {0})")]
    ZeroVector(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("bank update requires epoch >= 1")]
    EpochZero,
    #[error("invalid k-reciprocal parameters: need 1 <= k2 <= k1 < n (k1={k1}, k2={k2}, n={n})")]
    InvalidK { k1: usize, k2: usize, n: usize },
    #[error("empty sample set")]
    EmptySet,
    #[error("annotation matrix has no positive pairs")]
    NoPositivePairs,
    #[error("temperature beta must be positive")]
    BetaNonPositive,
    #[error("bank/annotation mismatch: {0}")]
    BankMismatch(String),
    #[error("domain score list is empty")]
    EmptyDomain,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss evaluator returned different values at the same point")]
    NonDeterministicLoss,
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("cache does not match model or gradient: {0}")]
    CacheMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {requested} larger than set of {available}")]
    BatchLargerThanSet { requested: usize, available: usize },
    #[error("annotation matrix is from epoch {annotated}, clock is at epoch {current}")]
    StaleAnnotation { annotated: usize, current: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no query has a valid gallery match")]
    NoValidQueries,
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
