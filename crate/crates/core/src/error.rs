use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image {id} is {height}x{width}, below the minimum {min}x{min}")]
    Sizing { id: String, height: usize, width: usize, min: usize },

    #[error("invalid image {id}: {detail}")]
    InvalidImage { id: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("template {template:?} has no \"{{}}\" placeholder")]
    Format { template: String },

    #[error("modalities misaligned at level {level}: {detail}")]
    Alignment { level: usize, detail: String },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension { what: String, expected: usize, found: usize },

    #[error("{targets} targets exceed the {queries} available queries")]
    Capacity { targets: usize, queries: usize },

    #[error("annotation record {record}: {detail}")]
    Parse { record: String, detail: String },

    #[error("could not place shape {shape} in image {image} after {attempts} attempts")]
    Placement { image: usize, shape: usize, attempts: usize },

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{path}: {detail}")]
    Toml { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
