use thiserror::Error;

use crate::graph::{EdgeId, FactorId, VariableId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GbpError {
    #[error("covariance is singular or too ill-conditioned (condition number {condition:.3e})")]
    SingularCovariance { condition: f64 },

    #[error("precision matrix is not invertible")]
    SingularPrecision,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid block permutation: {0}")]
    InvalidPermutation(String),

    #[error("marginalized block is singular even after jitter")]
    SingularBlock,

    #[error("unknown variable {0:?}")]
    UnknownVariable(VariableId),

    #[error("unknown factor {0:?}")]
    UnknownFactor(FactorId),

    #[error("no edge between variable {variable:?} and factor {factor:?}")]
    UnknownEdge {
        variable: VariableId,
        factor: FactorId,
    },

    #[error("edge {0:?} does not exist")]
    MissingEdge(EdgeId),

    #[error("graph has no edges")]
    EmptyGraph,

    #[error("graph is not a chain: {0}")]
    NotAChain(String),

    #[error("x = {x} lies outside the span [{lo}, {hi}]")]
    OutOfSpan { x: f64, lo: f64, hi: f64 },

    #[error("parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("dataset contains no measurements")]
    EmptyDataset,

    #[error("assembled information matrix is singular; the graph needs anchoring")]
    SingularSystem,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("snapshot schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for GbpError {
    fn from(e: std::io::Error) -> Self {
        GbpError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, GbpError>;
