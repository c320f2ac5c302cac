//! Two-dimensional functional mixed-effect models for functional data
//! observed repeatedly along a second axis.

pub mod artifacts;
pub mod cli;
pub mod covariance;
pub mod error;
pub mod fixed;
pub mod grid;
pub mod inference;
pub mod linalg;
pub mod pipeline;
pub mod pointwise;
pub mod reduction;
pub mod rng;
pub mod sim;
pub mod smooth;

pub use error::{FmmError, Result};
pub use grid::{Cell, Covariate, CovariateKind, FunctionalDataset, SamplingGrid};
