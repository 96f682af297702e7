//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("resonance: eigenvalue {re}{im:+}i lies within {tol:e} of the split line Re = {line}")]
    Resonance { re: f64, im: f64, line: f64, tol: f64 },

    #[error("condition A violated: eigenvalue {re}{im:+}i of the residue matrix has |Re - 1| <= {tol:e}")]
    ConditionA { re: f64, im: f64, tol: f64 },

    #[error("condition B violated: {0}")]
    ConditionB(String),

    #[error("condition C violated: forcing offset is not in the range of the residue matrix (residual {residual:e})")]
    ConditionC { residual: f64 },

    #[error("containment error: {0}")]
    Containment(String),

    #[error("decomposition error: parts are not a direct sum (condition number {cond:e})")]
    Decomposition { cond: f64 },

    #[error("inconsistent system: right-hand side is outside the range (residual {residual:e})")]
    Consistency { residual: f64 },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("numerical failure: contraction stalled, observed ratio {ratio} exceeds bound {bound}")]
    ContractionStall { ratio: f64, bound: f64 },

    #[error("accuracy error: {0}")]
    Accuracy(String),

    #[error("problem unsolvable: orthogonality residual {residual:e} exceeds threshold {threshold:e}")]
    Unsolvable { residual: f64, threshold: f64 },

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
