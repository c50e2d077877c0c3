use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file in a DICOM series or raw dump could not be ingested.
    #[error("ingestion error in {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("no DICOM slices found in {0}")]
    NoSlices(PathBuf),

    #[error("inconsistent slice geometry: {0}")]
    Geometry(String),

    #[error("size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("region out of bounds: {0}")]
    Region(String),

    #[error("checkpoint error in section `{section}`: {message}")]
    Checkpoint { section: String, message: String },

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),

    #[error("missing pretrained weights: {0}")]
    MissingWeights(String),

    #[error("training aborted at step {step}: non-finite {term}")]
    Training { step: usize, term: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("ablation run at alpha = {alpha}: {source}")]
    Ablation { alpha: f64, source: Box<Error> },

    #[error("I/O error on {path}: {source}")]
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

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingest { .. } | Error::NoSlices(_) => "ingest",
            Error::Geometry(_) => "geometry",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::Shape(_) => "shape",
            Error::Invalid(_) => "invalid",
            Error::NonFinite(_) => "non_finite",
            Error::Region(_) => "region",
            Error::Checkpoint { .. } => "checkpoint",
            Error::CheckpointNotFound(_) => "checkpoint_not_found",
            Error::MissingWeights(_) => "missing_weights",
            Error::Training { .. } => "training",
            Error::Config(_) => "config",
            Error::Ablation { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }

    /// True for contract violations on caller-supplied values.
    pub fn is_invariant_violation(&self) -> bool {
        if let Error::Ablation { source, .. } = self {
            return source.is_invariant_violation();
        }
        matches!(
            self,
            Error::Geometry(_) | Error::Shape(_) | Error::Invalid(_) | Error::Region(_)
        )
    }
}
