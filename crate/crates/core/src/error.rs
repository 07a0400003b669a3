use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report, grouped by the module that raises it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error at {path}: {source}")]
    Dataset {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("tokenizer training error: {0}")]
    Training(String),

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("warm-start error: {0}")]
    WarmStart(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: non-finite loss on batch [{}]", utt_ids.join(", "))]
    NonFiniteLoss { step: usize, utt_ids: Vec<String> },

    #[error("curriculum error: {0}")]
    Curriculum(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
