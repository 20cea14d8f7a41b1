//! Piecewise-linear ensembles fitted jointly over fixed partitions.
//!
//! A partition ensemble (trees or Voronoi cells) is fixed in advance. Every
//! cell carries an affine model, and all cells of all partitions are fitted
//! together by minimizing a penalized empirical risk with accelerated
//! proximal gradient descent. Supported penalties are the squared Frobenius
//! norm, a graph-Laplacian smoothness term, the row-sparse group norm,
//! the nuclear norm, and a multitask "dirty" split into common and
//! task-specific parts.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod json;
pub mod model;
pub mod objective;
pub mod partition;
pub mod prox;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
