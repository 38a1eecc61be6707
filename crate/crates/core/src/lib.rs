//! l1 + total-variation penalized linear regression with an approximate
//! leave-one-out cross-validation error computed from a single full-data fit.
//!
//! The pipeline is: [`solver::solve`] for the fit, [`partition::Partition`]
//! for the killed variables and locked clusters, and [`looe::approx_looe`] for
//! the error estimate. [`cv`] holds literal cross-validation for comparison and
//! [`datagen`] synthesizes partial-Fourier imaging problems.

pub mod config;
pub mod cv;
pub mod datagen;
pub mod error;
pub mod grid;
pub mod io;
pub mod looe;
pub mod partition;
pub mod solver;
pub mod sweep;

pub use error::{Error, Result};
pub use grid::{build_grid, GridGraph, SoftParams, TvVariant};
pub use looe::{approx_looe, LooeConfig, LooeResult};
pub use partition::Partition;
pub use solver::{objective, solve, solve_from, Problem, RegWeights, Solution, SolverConfig};
