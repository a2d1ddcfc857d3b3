use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("matrix data has length {len}, expected {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("argmax of an empty row")]
    EmptyRow,

    #[error("layer {layer} expects input dim {expected}, previous layer outputs {found}")]
    IncompatibleChain {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("index {index} out of range (bound {bound}) in {context}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("wrong IDX magic: expected {expected}, found {found}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated IDX file: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
