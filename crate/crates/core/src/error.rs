use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PLY format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated PLY body: expected {expected} vertices, read {read}")]
    TruncatedBody { expected: usize, read: usize },
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("manifest is missing column `{0}`")]
    MissingColumn(String),
    #[error("unparsable score at row {row}, column `{column}`: {value:?}")]
    UnparsableScore {
        row: usize,
        column: String,
        value: String,
    },
    #[error("manifest has no data rows")]
    EmptyManifest,
    #[error("manifest MOS range is empty (min = max = {0})")]
    EmptyRange(f64),
    #[error("manifest row {0} has an empty reference_id")]
    MissingReference(usize),
    #[error("manifest: {0}")]
    Manifest(String),

    #[error("k-means needs k <= number of points (k = {k}, n = {n})")]
    TooFewPoints { k: usize, n: usize },
    #[error("non-finite feature value at point {0}")]
    NonFiniteFeature(usize),
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient requested for a value not recorded on this tape")]
    UnrecordedForward,
    #[error("node {0} has an empty attention neighborhood")]
    EmptyNeighborhood(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("split needs at least 3 distinct reference clouds, found {0}")]
    TooFewReferences(usize),
    #[error("pipeline configuration does not match checkpoint: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("target scores are constant")]
    ConstantTarget,

    #[error("{path}: {source}")]
    Cloud {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches the offending cloud's path to a pipeline error.
    pub(crate) fn in_cloud(self, path: impl Into<PathBuf>) -> Self {
        match self {
            e @ (Error::Cloud { .. } | Error::Io { .. }) => e,
            e => Error::Cloud {
                path: path.into(),
                source: Box::new(e),
            },
        }
    }
}
