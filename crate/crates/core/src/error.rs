use std::path::PathBuf;

use kws_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, KwsError>;

#[derive(Debug, Error)]
pub enum KwsError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed wav {}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("unsupported sample rate {rate} Hz in {} (expected 16000, no resampling)", path.display())]
    UnsupportedSampleRate { path: PathBuf, rate: u32 },
    #[error("unsupported wav encoding in {}: {detail}", path.display())]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("clip of {len} samples is shorter than the requested {want}")]
    ClipTooShort { len: usize, want: usize },
    #[error("augment: {0}")]
    Augment(String),
    #[error("frontend: {0}")]
    Frontend(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl KwsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
