use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint format version {found} is incompatible (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Tape(#[from] tapegrad::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DistillError {
    pub fn config(msg: impl Into<String>) -> Self {
        DistillError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        DistillError::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 1 config, 2 numeric, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            DistillError::Config(_) => 1,
            DistillError::Numeric(_) => 2,
            DistillError::GradCheck(_) => 3,
            DistillError::CheckpointVersion { .. } | DistillError::Integrity(_) => 1,
            DistillError::Tape(e) => match e {
                tapegrad::Error::NonFinite(_) => 2,
                _ => 1,
            },
            DistillError::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, DistillError>;
