//! Special functions and the small dense linear algebra the model needs.
//!
//! Everything here is a pure function of its inputs.

mod linalg;
mod normal;
mod special;

pub use linalg::{cholesky_solve, max_eigpair, Cholesky, EigPair, SymMatrix, POWER_ITERATION_CAP};
#[allow(unused_imports)]
pub(crate) use linalg::{dot, norm2, norm_inf};
pub use normal::{
    std_normal_cdf, std_normal_pdf, std_normal_quantile, std_normal_sf, two_sided_p_value,
};
pub use special::{digamma, log_gamma, trigamma};
pub(crate) use special::{digamma_unchecked, log_gamma_unchecked, trigamma_unchecked};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{function} is undefined at {value}")]
    Domain { function: &'static str, value: f64 },
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("eigen iteration did not converge after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },
}
