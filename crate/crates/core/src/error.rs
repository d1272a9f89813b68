use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid of {width}x{height} is too small, operation needs at least {min}x{min}")]
    DimensionTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("mask must contain both foreground and background pixels")]
    DegenerateMask,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("evolution step {step} produced a non-finite value at ({x}, {y}); the time step is likely too large")]
    NonFinite { step: usize, x: usize, y: usize },
    #[error("evolution trace is incomplete: expected {expected} cached steps, found {found}")]
    IncompleteTrace { expected: usize, found: usize },
    #[error("non-finite adjoint at step {step}")]
    NonFiniteAdjoint { step: usize },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("tensor shape mismatch: {0}")]
    Shape(String),
    #[error("input of {width}x{height} is not divisible by {divisor}")]
    NotDivisible {
        width: usize,
        height: usize,
        divisor: usize,
    },
    #[error("activation cache is stale: {0}")]
    StaleCache(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("could not place {shapes} non-overlapping shapes after {attempts} attempts")]
    Placement { shapes: usize, attempts: usize },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn for_sample(self, id: &str) -> Self {
        Error::Sample {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
