use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}: {reason}")]
    Format { file: String, reason: String },

    #[error("{file}: invalid UTF-8 at byte {position}")]
    Decode { file: String, position: usize },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("span [{start}, {end}) out of bounds for article {article_id} (length {len})")]
    Bounds {
        article_id: u32,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("embeddings: {0}")]
    Embeddings(String),

    #[error("training: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
