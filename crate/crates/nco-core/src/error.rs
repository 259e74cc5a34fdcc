//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("problem size below minimum: n = {n}, minimum is {min}")]
    SizeBelowMinimum { n: usize, min: usize },

    #[error("problem size exceeds {method} cap: n = {n}, cap is {cap}")]
    SizeAboveCap {
        method: &'static str,
        n: usize,
        cap: usize,
    },

    #[error("invalid tour: {reason}")]
    InvalidTour { reason: String },

    #[error("malformed instance: {reason}")]
    MalformedInstance { reason: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("no feasible action: softmax row is fully masked")]
    NoFeasibleAction,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("decoding complete: all nodes are visited")]
    DecodingComplete,

    #[error("unknown method '{name}'; available: {available}")]
    UnknownMethod { name: String, available: String },

    #[error(
        "invalid strategy '{spec}': {reason}; expected one of \
         fixed:N | uniform:A..B[,mode=epoch|batch] | classic:A..B | \
         staircase:A..B[,alpha=F][,probe=F]"
    )]
    StrategyParse { spec: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
