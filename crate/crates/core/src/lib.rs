//! Learning heterogeneous pairwise exponential-family models from a single
//! observation per unit, and using the fitted models for unit-level
//! counterfactual means and measurement-error imputation.
//!
//! The estimator core ([`model`], [`loss`], [`optimizer`]) is generic over
//! the floating point type; the simulation, inference and study layers work
//! in `f64`.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod imputation;
pub mod inference;
pub mod io;
pub mod optimizer;
pub mod quadrature;
pub mod sampler;
pub mod scalar;
pub mod seeding;
pub mod summation;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Bounds = model::Bounds<f64>;
pub type Dataset = model::Dataset<f64>;
pub type ExtendedParams = model::ExtendedParams<f64>;
pub type JointParams = model::JointParams<f64>;
pub type PopulationMatrix = model::PopulationMatrix<f64>;
pub type UnitFields = model::UnitFields<f64>;

pub type BoundsF32 = model::Bounds<f32>;
pub type DatasetF32 = model::Dataset<f32>;
pub type ExtendedParamsF32 = model::ExtendedParams<f32>;
pub type PopulationMatrixF32 = model::PopulationMatrix<f32>;
pub type UnitFieldsF32 = model::UnitFields<f32>;
