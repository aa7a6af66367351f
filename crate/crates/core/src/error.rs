use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("character {0:?} is not in the charset")]
    UnknownChar(char),

    #[error("label of length {len} exceeds the limit of {max}")]
    LabelTooLong { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image format: {0}")]
    Image(String),

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::TapeConsumed => "tape_consumed",
            Error::NonFinite { .. } => "non_finite",
            Error::MissingGrad(_) => "missing_grad",
            Error::UnknownParam(_) => "unknown_param",
            Error::UnknownChar(_) => "unknown_char",
            Error::LabelTooLong { .. } => "label_too_long",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image(_) => "image",
            Error::Manifest { .. } => "manifest",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}

pub(crate) fn arg_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument { op, detail: detail.into() })
}
