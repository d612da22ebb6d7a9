//! Semiparametric estimation of mixed-graph structure: a smoothing-spline
//! ANOVA density for the covariates and a sparse conditional Gaussian
//! graphical model for the responses given the covariates.

pub mod cggm;
pub mod data;
pub(crate) mod dense;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod sim;
pub mod ssanova;
pub mod tuning;

pub use error::{Error, Result};
