use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: String,
        got: String,
    },

    #[error("log of non-positive value (minimum {min})")]
    NonPositiveLog { min: f64 },

    #[error("{op}: empty reduction")]
    EmptyReduction { op: &'static str },

    #[error("backward root must be a single element, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("batch norm running statistics are uninitialized; run a train-mode forward first")]
    UninitializedBatchNorm,

    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training sample {index} is labeled anomalous; training data must be normal only")]
    AnomalousTrainingSample { index: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: usize, value: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            dim: dim.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data(_) | Error::AnomalousTrainingSample { .. } | Error::Format(_) | Error::Io { .. } | Error::Csv(_) => 3,
            Error::NonFinite { .. } | Error::NonPositiveLog { .. } => 4,
            _ => 1,
        }
    }
}
