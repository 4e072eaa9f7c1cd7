use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of bounds for axis `{axis}` of length {len}")]
    IndexOutOfBounds {
        axis: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("kernel extent {kernel} exceeds padded input extent {padded} along {axis}")]
    KernelTooLarge {
        axis: &'static str,
        kernel: usize,
        padded: usize,
    },

    #[error(
        "stride {stride} does not divide (padded input - kernel) = {span} along {axis} \
         (remainder {remainder}); pass --allow-truncate to floor instead"
    )]
    StrideRemainder {
        axis: &'static str,
        span: usize,
        stride: usize,
        remainder: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite gradient in layer `{layer}`")]
    NonFiniteGradient { layer: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unexpected magic 0x{found:08x} (expected 0x{expected:08x})")]
    UnexpectedMagic { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("malformed dump: {0}")]
    MalformedDump(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// True for errors that originate from the filesystem or a malformed file.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::UnexpectedMagic { .. }
                | Error::TruncatedPayload { .. }
                | Error::DimensionOverflow(_)
                | Error::MalformedDump(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
