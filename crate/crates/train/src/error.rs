use std::process::ExitCode;

/// Errors of the training harness and CLI, mapped onto process exit codes:
/// configuration problems exit 2, numeric aborts (NaN loss) exit 3,
/// everything else 1.
#[derive(thiserror::Error, Debug)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] mxfp4::MxError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl TrainError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            TrainError::Config(_) => ExitCode::from(2),
            TrainError::Numeric(_) => ExitCode::from(3),
            _ => ExitCode::from(1),
        }
    }
}
