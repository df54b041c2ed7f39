use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("weights blob holds {actual} floats but the manifest declares {expected}")]
    WeightsSizeMismatch { expected: usize, actual: usize },

    #[error("weights sha256 mismatch: manifest says {expected}, blob hashes to {actual}")]
    WeightsHashMismatch { expected: String, actual: String },

    #[error("invalid graph at layer `{layer}`: {reason}")]
    GraphValidation { layer: String, reason: String },

    #[error("tap with {channels} channels cannot feed a {classifier_dim}-dim classifier")]
    UnsupportedTapShape { channels: usize, classifier_dim: usize },

    #[error("tap `{0}` was not captured")]
    MissingTap(String),

    #[error("normal equations are singular (alpha = 0 with a rank-deficient design)")]
    SingularSystem,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("target has zero variance")]
    DegenerateTarget,

    #[error("insufficient samples: n = {n}, p = {p} leaves {dof} residual degrees of freedom")]
    InsufficientSamples { n: usize, p: usize, dof: i64 },

    #[error("correlation basis unavailable: {0}")]
    BasisUnavailable(String),

    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: {message}")]
    Schema { file: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            file: file.into(),
            message: message.into(),
        }
    }

    pub(crate) fn graph(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::GraphValidation {
            layer: layer.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 for usage/configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::BasisUnavailable(_) => 2,
            Error::Stage { source, .. } | Error::Sample { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
