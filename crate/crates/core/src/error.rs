//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("reduction over an empty (fully masked) input")]
    EmptyReduction,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("Hermite degree {k} above the supported cap {max}")]
    UnsupportedDegree { k: usize, max: usize },

    #[error("network spec rejected at layer {layer}: {rule}")]
    Build { layer: usize, rule: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("IDX magic mismatch: got {got:#010x}, expected {expected:#010x}")]
    IdxMagic { got: u32, expected: u32 },

    #[error("IDX file truncated: needed {needed} bytes, got {got}")]
    IdxTruncated { needed: usize, got: usize },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
