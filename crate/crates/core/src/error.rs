use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("validation error at row {row}: {msg}")]
    Validation { row: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("lookup error: index {index} out of range for slot {slot} (vocab {vocab})")]
    OutOfVocab { slot: usize, index: u32, vocab: usize },
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: labels contain a single class")]
    SingleClass,
    #[error("group has no positive label")]
    NoPositives,
    #[error("undefined baseline value {0}")]
    UndefinedBaseline(f64),
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite score")]
    NonFinite,
}

#[derive(Debug, Error, PartialEq)]
pub enum StageError {
    #[error("domain error: preference {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid posterior state: {0}")]
    InvalidState(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
