use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported content: {0}")]
    UnsupportedContent(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("empty latent: frame has no points")]
    EmptyLatent,

    #[error("encode error: {0}")]
    Encode(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("model mismatch: bitstream was produced with a different model")]
    ModelMismatch,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("curves have no overlapping {0} range")]
    NoOverlap(&'static str),

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_frame(self, index: usize) -> Self {
        Error::Frame {
            index,
            source: Box::new(self),
        }
    }
}
