use thiserror::Error;

pub type Result<T> = std::result::Result<T, HrmError>;

#[derive(Debug, Error)]
pub enum HrmError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("transform error: {0}")]
    Transform(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HrmError {
    /// Process exit code for the CLI: 1 for input/config problems, 2 for
    /// numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            HrmError::Numeric(_) => 2,
            _ => 1,
        }
    }
}
