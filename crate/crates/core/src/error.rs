//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by symbol evaluation and differentiation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SymbolError {
    #[error("input error: {0}")]
    Input(String),
    #[error("evaluation produced NaN at x={x:?}, xi={xi:?}")]
    Evaluation { x: Vec<f64>, xi: Vec<f64> },
    #[error("derivative of total order {requested} exceeds the capability {available}")]
    Capability { requested: usize, available: usize },
    #[error("numerical error: {0}")]
    Numerical(String),
}

/// Top-level error type.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum DnError {
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error("input error: {0}")]
    Input(String),
    #[error("singular matrix at x={x:?}, xi={xi:?}, lambda={lambda}: {detail}")]
    Singular {
        x: Vec<f64>,
        xi: Vec<f64>,
        lambda: String,
        detail: String,
    },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contour error: {0}")]
    Contour(String),
}

impl DnError {
    /// True for errors caused by bad user input rather than numerics.
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            DnError::Input(_) | DnError::Symbol(SymbolError::Input(_)) | DnError::Resource(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, DnError>;
