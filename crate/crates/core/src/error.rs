use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the degenerate-feature floor")]
    ZeroNormVector { norm: f64 },

    #[error("empty vector")]
    EmptyVector,

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "sinkhorn did not converge: marginal residual {residual:e} after {iterations} iterations"
    )]
    SinkhornNotConverged {
        residual: f64,
        iterations: usize,
        /// Score under the last plan; usable if the caller tolerates the residual.
        score: f64,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("class {0} has no training samples")]
    MissingClass(usize),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("support sample has no label")]
    MissingSupportLabel,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("bad magic: expected \"ATAF\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("container dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
