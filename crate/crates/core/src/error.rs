//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was given tensors whose shapes do not fit it.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A class label outside `0..num_classes`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// `backward` was asked for the gradient of a node the loss does not
    /// depend on. This is an error rather than a silent zero.
    #[error("node {0} is not reachable from the loss")]
    UnreachableNode(usize),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// Differentiating through the gradient of this op is not supported.
    /// Only the predictor path (linear/relu/softmax-cross-entropy and
    /// elementwise arithmetic) carries second-order gradients.
    #[error("second-order differentiation through {0} gradients is not supported")]
    SecondOrderUnsupported(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from user-supplied configuration or input
    /// files rather than from the computation itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::InvalidData(_) | Error::InvalidArchitecture(_)
        )
    }
}
