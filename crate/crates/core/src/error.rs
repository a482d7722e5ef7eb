use std::path::PathBuf;

use hvtr_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("degenerate triangle {face} (area {area:.3e})")]
    DegenerateTriangle { face: usize, area: f64 },
    #[error("uv atlas texel ({x}, {y}) covered by faces {first} and {second}")]
    AtlasOverlap { x: usize, y: usize, first: usize, second: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { what, msg: msg.into() }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Data { path: path.into(), msg: msg.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
