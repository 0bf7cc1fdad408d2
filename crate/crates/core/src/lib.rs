//! Multivariate negative binomial regression for clustered counts, with
//! residual and influence diagnostics.
//!
//! All numerical code is generic over [`Real`] (implemented for `f32` and
//! `f64`). The aliases at the crate root fix the scalar to `f64`.

mod scalar;

pub mod numerics;
pub mod model;
pub mod estimation;
pub mod simulation;
pub mod residuals;
pub mod influence;

pub use scalar::Real;

pub type Cluster = model::Cluster<f64>;
pub type Dataset = model::LongitudinalDataset<f64>;
pub type Theta = model::ThetaParams<f64>;
pub type Matrix = numerics::SymMatrix<f64>;
