use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),

    #[error("invalid normalizer: {0}")]
    InvalidNormalizer(String),

    #[error("bin index {index} out of range for {bins} bins (parameter {param})")]
    IndexOutOfRange { param: usize, index: u32, bins: u32 },

    #[error("context {id} outside vocabulary of size {vocab}")]
    UnknownContext { id: u32, vocab: u32 },

    #[error("dimensions not prefix of ordering")]
    DimsNotPrefix,

    #[error("quantile too high for sample (q = {q}, max occupancy = {max_occupancy})")]
    QuantileTooHigh { q: f64, max_occupancy: f64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no analytic form for scenario kind {0}")]
    NoAnalyticForm(&'static str),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
