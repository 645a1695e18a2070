use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular transmission: t = {value} at (row {row}, col {col}) is below epsilon {epsilon}")]
    Singularity {
        row: usize,
        col: usize,
        value: f64,
        epsilon: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("pairing error: unpaired files {0:?}")]
    Pairing(Vec<String>),

    #[error("load error for key `{key}`: {reason}")]
    Load { key: String, reason: String },

    #[error("shape mismatch for key `{key}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        key: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: String, step: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
