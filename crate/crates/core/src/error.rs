use langaux_craftworld::CraftError;
use langaux_numcore::NumError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Env(#[from] CraftError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid instruction intervals: {0}")]
    Interval(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("cache conflict for cell `{cell}`: stored hash {stored}, requested {requested}")]
    Cache {
        cell: String,
        stored: String,
        requested: String,
    },
    #[error("evaluated task `{0}` is not in the unseen split")]
    Leak(String),
    #[error("plot needs at least two x values, got {0}")]
    DegeneratePlot(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
