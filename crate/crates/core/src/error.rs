use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file}, line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("segment {segment} references unknown neighbor {neighbor}")]
    Referential { segment: usize, neighbor: usize },

    #[error("invalid road network: {0}")]
    Network(String),

    #[error("unknown segment {0}")]
    UnknownSegment(usize),

    #[error("no traffic state for segment {segment} at slice {slice}")]
    MissingState { segment: usize, slice: i64 },

    #[error("timestamps decrease at position {index}: {previous} -> {next}")]
    Ordering {
        index: usize,
        previous: i64,
        next: i64,
    },

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("cannot split {n} items into {parts} non-empty parts")]
    SplitSize { n: usize, parts: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dynamic feature window is missing slice {slice}")]
    Window { slice: i64 },

    #[error("no fused representation for segment {segment} at slice {slice}")]
    Coverage { segment: usize, slice: i64 },

    #[error("task `{0}` is not registered")]
    Registry(String),

    #[error("task `{task}` expects {expected} input, got {found}")]
    Modality {
        task: String,
        expected: String,
        found: String,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("prompt of length {len} exceeds the maximum sequence length {max}")]
    Length { len: usize, max: usize },

    #[error("non-finite value in {component}")]
    Numeric { component: String },

    #[error("missing upstream artifact: {}", .0.display())]
    Dependency(PathBuf),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

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
}
