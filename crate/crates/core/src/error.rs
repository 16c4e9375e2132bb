//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or layer shape disagreement. The message names the site and both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value that must be finite came out NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A cluster lost all of its (soft or hard) mass.
    #[error("degenerate cluster {cluster}: {detail}")]
    DegenerateCluster { cluster: usize, detail: String },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid value for config key `{key}`: {detail}")]
    InvalidConfigValue { key: String, detail: String },

    #[error("missing required config key `{0}`")]
    MissingConfigKey(String),

    /// Malformed input data (IDX/CSV ingestion, label files, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A pipeline phase aborted; wraps the underlying cause.
    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_phase(self, phase: &str) -> Error {
        Error::Phase {
            phase: phase.to_string(),
            source: Box::new(self),
        }
    }
}
