use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),
    #[error("no feature stored for ({video_id}, {frame_index})")]
    MissingFeature { video_id: String, frame_index: u32 },
    #[error("frame {got} arrived after frame {newest}; frames must be pushed in increasing order")]
    OutOfOrder { newest: u32, got: u32 },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    /// True for errors caused by invalid user configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    pub(crate) fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }
}
