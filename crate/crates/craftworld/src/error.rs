use thiserror::Error;

pub type Result<T> = std::result::Result<T, CraftError>;

#[derive(Debug, Error)]
pub enum CraftError {
    #[error("recipe table line {line}: {message}")]
    Recipe { line: usize, message: String },
    #[error("task generation failed: {0}")]
    Generation(String),
    #[error("oracle planning failed: {0}")]
    Planning(String),
    #[error("{0}")]
    Action(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
