use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("class {class} has {available} usable support instances, {required} required")]
    InsufficientSupport {
        class: u64,
        available: usize,
        required: usize,
    },

    #[error("training diverged at iteration {iteration} (episode seed {seed}): {detail}")]
    Diverged {
        iteration: usize,
        seed: u64,
        detail: String,
    },

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
