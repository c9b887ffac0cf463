use std::path::PathBuf;

use polyformer_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("lifecycle error: {0}")]
    Lifecycle(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("state mismatch: {0}")]
    StateMismatch(String),
    #[error("non-finite loss at step {step} of phase {phase}")]
    NonFiniteLoss { phase: String, step: u64 },
    #[error("freeze ledger violated in phase {phase}: unexpected changes to {names:?}")]
    Ledger { phase: String, names: Vec<String> },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}
