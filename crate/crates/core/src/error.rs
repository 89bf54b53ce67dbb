use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Input,
    Numerical,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

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

    #[error("weight archive: {0}")]
    Archive(String),

    #[error("weight archive is missing parameter `{0}`")]
    MissingParameter(String),

    #[error("parameter `{path}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        path: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("checkpoint layout not recognized; unmatched keys: {}", .0.join(", "))]
    UnrecognizedCheckpoint(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("layer {0} was not captured")]
    LayerNotCaptured(usize),

    #[error("image of {height}x{width} is too small (minimum side {min})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("key row {row} has zero norm")]
    ZeroNormKey { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite {
        component: String,
        iteration: usize,
        diagnostic: Option<Box<crate::losses::LossReport>>,
    },

    #[error("optimization diverged at iteration {iteration}: distance {distance:e} exceeds {factor}x best {best:e}")]
    Diverged {
        iteration: usize,
        distance: f64,
        best: f64,
        factor: f64,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::LayerOutOfRange { .. } => {
                ErrorKind::Usage
            }
            Error::Io { .. }
            | Error::Image { .. }
            | Error::Archive(_)
            | Error::MissingParameter(_)
            | Error::ShapeMismatch { .. }
            | Error::UnrecognizedCheckpoint(_)
            | Error::ImageTooSmall { .. } => ErrorKind::Input,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::ZeroNormKey { .. } => {
                ErrorKind::Numerical
            }
            Error::Tensor(_) | Error::LayerNotCaptured(_) | Error::Shape(_) => ErrorKind::Internal,
        }
    }
}
