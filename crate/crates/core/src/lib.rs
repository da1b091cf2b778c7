//! Low-rank Poisson models with row and column covariates for count tables
//! with missing cells.
//!
//! The log-mean of each cell is an offset plus covariate main effects plus a
//! doubly centered interaction matrix penalized by its nuclear norm. The
//! crate fits that model, selects the penalty automatically (bootstrap
//! quantile of the null-thresholding statistic, or cross-validation), tests
//! for the presence of interactions, and derives imputations, biplots and
//! multiplicative decompositions from a fit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod par;
pub mod select;
pub mod sim;
pub mod solver;

mod glm;

pub use error::{Error, Result};
pub use model::{CountTable, CovariateSet, ModelParams, NaturalParamMatrix};
pub use solver::{fit, fit_path, FitResult, SolverConfig};
pub use select::{SelectionReport, TestOutcome};
