//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by instance parsing, the diffusion chain, and the
/// training/evaluation drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input text (Sudoku line, DIMACS file, ...). `pos` is the
    /// character or line position of the offending token.
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    /// Instance-level invariant violation (bad scope, out-of-range given, ...).
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    /// Assignment value outside the variable domain.
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    /// Non-finite or shape-mismatched diffusion state.
    #[error("state error: {0}")]
    State(String),

    /// A penalty was applied to an incompatible constraint shape
    /// (e.g. AllDifferent with |scope| != K).
    #[error("formulation error: {0}")]
    Formulation(String),

    /// Invalid mask-policy input (negative scores, bad rate range, ...).
    #[error("policy error: {0}")]
    Policy(String),

    /// The reverse chain aborted; `step` is the reverse-time index.
    #[error("chain error at step {step}: {msg}")]
    Chain { step: usize, msg: String },

    /// Denoiser input/output shape mismatch.
    #[error("interface error: {0}")]
    Interface(String),

    /// Non-finite activations inside the attention denoiser.
    #[error("numeric error in layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    /// An exact oracle refused an input that exceeds its enumeration bound.
    #[error("refused: {0}")]
    Refused(String),

    /// Bad run configuration (missing reference file, two budgets, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
