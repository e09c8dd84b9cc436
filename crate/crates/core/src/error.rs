use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the numeric core, the layers and the trainer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A training-time invariant was broken by the caller (stale or missing
    /// forward state, double sampling of a cluster interface, wrong mode).
    #[error("logic error: {0}")]
    Logic(String),

    #[error(
        "non-finite loss at iteration {iteration} (layer {layer}, max |grad| = {max_abs_grad})"
    )]
    NonFiniteLoss {
        iteration: u64,
        layer: usize,
        max_abs_grad: f64,
    },

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Domain {
        op,
        detail: detail.into(),
    }
}
