use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("grids do not nest: {0}")]
    NonNesting(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Snapshot value below the positivity floor required to eliminate beta and gamma.
    #[error("snapshot floor violated at node (i={i}, j={j}): min(|p1|,|p2|) = {value:e} < {floor:e}")]
    KappaViolation {
        i: usize,
        j: usize,
        value: f64,
        floor: f64,
    },

    #[error("Carleman weight overflow: lambda*b^2 = {0} exceeds 300")]
    WeightOverflow(f64),

    #[error("linear solver did not converge at time step {step} (field {field}, residual {residual:e})")]
    LinearSolver {
        step: usize,
        field: &'static str,
        residual: f64,
    },

    #[error("line search failed after {halvings} halvings at iteration {iteration}")]
    LineSearch { iteration: usize, halvings: usize },

    #[error("optimizer stopped ({reason}) after {iterations} iterations with stationarity {grad_norm:e}")]
    NotConverged {
        reason: String,
        iterations: usize,
        grad_norm: f64,
    },

    #[error("non-finite functional value at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("degenerate abscissae: {0}")]
    DegenerateAbscissae(String),

    #[error("field file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Failures of the numerics, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::KappaViolation { .. }
                | Error::WeightOverflow(_)
                | Error::LinearSolver { .. }
                | Error::LineSearch { .. }
                | Error::NotConverged { .. }
                | Error::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
