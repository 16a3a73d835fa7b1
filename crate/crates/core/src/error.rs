use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration value out of range; `field` is a dotted path.
    #[error("{field}: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss is detached from every tracked tensor")]
    Detached,

    #[error("{0}")]
    Phase(String),

    #[error("label {label} outside the allowed class range {range:?}")]
    LabelOutOfRange {
        label: usize,
        range: std::ops::Range<usize>,
    },

    #[error("{0}")]
    Metric(String),

    #[error("divergence during {phase} phase (task {task}, epoch {epoch}): loss = {loss}")]
    Divergence {
        phase: &'static str,
        task: usize,
        epoch: usize,
        loss: f64,
    },

    #[error("{path}: row {row}, column {column}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn field(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Prefixes the field path of an [`Error::InvalidField`] with `section`.
    pub fn within(self, section: &str) -> Self {
        match self {
            Error::InvalidField { field, reason } => Error::InvalidField {
                field: format!("{section}.{field}"),
                reason,
            },
            other => other,
        }
    }
}
