use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("mask value {value} at index {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: f32 },
    #[error("pixel value {value} at index {index} outside [0, 1]")]
    OutOfRangePixel { index: usize, value: f32 },
    #[error("image {height}x{width} is below the 16x16 minimum")]
    ImageTooSmall { height: usize, width: usize },
    #[error("unsupported backbone kind {0:?}")]
    UnsupportedBackbone(String),
    #[error("input {height}x{width} incompatible with model: {reason}")]
    IncompatibleInput {
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no mask found for image stem {0:?}")]
    UnpairedStem(String),
    #[error("dataset at {0} contains no samples")]
    EmptyDataset(PathBuf),
    #[error("dataset of {0} samples is too small to split")]
    DatasetTooSmall(usize),
    #[error("training split is empty")]
    EmptyTrainingSplit,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },
    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checkpoint does not match model: {0}")]
    ConfigMismatch(String),
    #[error("split manifest differs from the one on disk at {0}")]
    ManifestMismatch(PathBuf),
    #[error("malformed {what}: {reason}")]
    Parse { what: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, reason: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            reason: reason.to_string(),
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidThreshold(_) => "invalid-threshold",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonBinaryMask { .. } => "non-binary-mask",
            Error::OutOfRangePixel { .. } => "out-of-range-pixel",
            Error::ImageTooSmall { .. } => "image-too-small",
            Error::UnsupportedBackbone(_) => "unsupported-backbone",
            Error::IncompatibleInput { .. } => "incompatible-input",
            Error::InvalidConfig(_) => "invalid-config",
            Error::UnpairedStem(_) => "unpaired-stem",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::DatasetTooSmall(_) => "dataset-too-small",
            Error::EmptyTrainingSplit => "empty-training-split",
            Error::EmptyInput(_) => "empty-input",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Integrity { .. } => "integrity",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::ManifestMismatch(_) => "manifest-mismatch",
            Error::Parse { .. } => "parse",
        }
    }
}
