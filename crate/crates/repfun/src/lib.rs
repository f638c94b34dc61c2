//! Penalized linear regression and binary classification for repeated
//! functional data: subjects carry `p` random curves recorded under `p`
//! experimental conditions, and the coefficient functions are encouraged to
//! fuse across conditions that behave alike.
//!
//! The crate is organised bottom-up:
//!
//! * [`basis`] expands curves over a B-spline system and provides the L2
//!   geometry (Gram matrix, inner products, norms) everything else runs in.
//! * [`geometry`] handles the condition descriptors: distances, the
//!   nearest-neighbor map, and clustering into condition groups.
//! * [`fusion`] builds the linear operators that turn fusion penalties into
//!   plain group-lasso penalties, plus the transformed design matrices.
//! * [`solver`] is a dense group-lasso solver (accelerated proximal
//!   gradient with monotone restart).
//! * [`estimators`] ties the pieces into the actual fitting routines (FU,
//!   GFUL, group lasso, group means, multivariate functional PCR) with
//!   cross-validation and the binary classification re-coding.
//! * [`simulate`] generates the synthetic benchmark scenarios and scores
//!   estimators against the known equality structure.
//!
//! All numeric code is generic over the scalar type through [`Real`];
//! `f64` aliases for the main types are exported at the crate root.

// Validation compares with `!(x > 0)` on purpose: the negation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod fusion;
pub mod geometry;
pub mod simulate;
pub mod solver;

mod real;

pub use error::{Error, Result};
pub use real::Real;

/// `f64` aliases for the commonly used types.
pub type BasisSystem64 = basis::BasisSystem<f64>;
pub type FunctionalDataset64 = dataset::FunctionalDataset<f64>;
pub type ConditionSet64 = geometry::ConditionSet<f64>;
pub type FuTransform64 = fusion::FuTransform<f64>;
pub type GfulTransform64 = fusion::GfulTransform<f64>;
pub type TransformedDesign64 = fusion::TransformedDesign<f64>;
pub type GroupLassoProblem64<'a> = solver::GroupLassoProblem<'a, f64>;
pub type SolverReport64 = solver::SolverReport<f64>;
pub type FitResult64 = estimators::FitResult<f64>;
pub type CvConfig64 = estimators::CvConfig<f64>;
pub type ScenarioSpec64 = simulate::ScenarioSpec<f64>;
