use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing header for volume {0}")]
    MissingHeader(PathBuf),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("volume {0} contains non-finite values")]
    NonFiniteData(PathBuf),
    #[error("invalid spacing {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("mask is empty")]
    EmptyMask,
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("no lung component found")]
    NoLungFound,
    #[error("point {0:?} lies outside the control grid extent")]
    OutOfExtent([f64; 3]),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("model manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("case {0} has no registered PET")]
    MissingRegisteredPet(String),
    #[error("late fusion needs trained {0} model")]
    MissingUpstreamModel(&'static str),
    #[error("model expects {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("no records to aggregate")]
    NoRecords,
    #[error("{cases} cases cannot be split into {folds} folds")]
    TooFewCases { cases: usize, folds: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed structured text in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

/// Serializes `value` as pretty JSON to `path`.
pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
