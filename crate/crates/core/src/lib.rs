//! Numerical toolkit for parameter-elliptic Douglis–Nirenberg
//! pseudodifferential systems.
//!
//! The crate covers symbol evaluation and composition ([`symbols`]),
//! sampled Λ-ellipticity certificates ([`ellipticity`]), resolvent
//! parametrices ([`parametrix`]), leading-order diagonalization
//! ([`diagonalize`]), periodic discretizations and resolvent checks
//! ([`discretize`]), contour-integral functional calculus ([`funcalc`]) and
//! the generalized thermoelastic plate system ([`thermoplate`]).

pub mod diagonalize;
pub mod discretize;
pub mod ellipticity;
pub mod error;
pub mod funcalc;
pub mod jet;
pub mod linalg;
pub mod parametrix;
pub mod symbols;
pub mod thermoplate;

pub use error::{DnError, Result, SymbolError};
pub use symbols::{bracket, DNSystem, ScalarSymbol, SymbolExpr, SymbolKind};

pub type C64 = num_complex::Complex64;
