use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ScarError {
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation failed after {attempts} attempt(s): {reason}")]
    Generation { attempts: usize, reason: String },
    #[error("client error: {0}")]
    Client(String),
    #[error("verifier unavailable: {0}")]
    VerifierUnavailable(String),
    #[error("invalid sample: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] virtue_core::Error),
}

impl ScarError {
    pub fn io(path: &Path, source: std::io::Error) -> ScarError {
        ScarError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ScarError>;
