use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NtpsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("requested rank {k} is outside 1..={max}")]
    InvalidRank { k: usize, max: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("right-hand matrix is indefinite after regularization (smallest eigenvalue {smallest:e})")]
    Indefinite { smallest: f64 },

    #[error("right-hand matrix retains only {available} directions, {requested} requested")]
    RankDeficient { requested: usize, available: usize },

    #[error("inner matrix is singular beyond ridge tolerance")]
    Singular,

    #[error("no samples")]
    NoSamples,

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("statistics metadata mismatch: {0}")]
    MetadataMismatch(String),

    #[error("basis has zero Frobenius norm")]
    ZeroBasis,

    #[error("score {value} outside [0, 1] beyond tolerance")]
    ScoreOutOfRange { value: f64 },

    #[error("target is tied: margin {margin} is not positive")]
    NonPositiveMargin { margin: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("zero rank variance in {0}")]
    ZeroVariance(&'static str),
}

pub type Result<T, E = NtpsError> = std::result::Result<T, E>;
