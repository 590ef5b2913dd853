use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("region {x0},{y0}+{size} exceeds {width}x{height} image")]
    OutOfBounds {
        x0: usize,
        y0: usize,
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("image {width}x{height} is smaller than patch size {size}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        size: usize,
    },
    #[error("plane {width}x{height} is smaller than 3x3")]
    PlaneTooSmall { width: usize, height: usize },
    #[error("degenerate interpolation geometry: {0}")]
    DegenerateGeometry(String),
    #[error("singular linear system")]
    SingularSystem,
    #[error("resize by {factor} of {width}x{height} produces an empty image")]
    OutputTooSmall {
        width: usize,
        height: usize,
        factor: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("patch size {0} is not one of 64, 128, 256")]
    BadPatchSize(usize),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("invalid synthetic camera spec: {0}")]
    InvalidSpec(String),
    #[error("no prediction for {0}")]
    MissingPrediction(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {value}")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("weight store: {0}")]
    WeightFormat(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::File {
            path: path.into(),
            source,
        })
    }
}
