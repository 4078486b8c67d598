//! Stratified models with a jointly learned Laplacian graph.

pub mod cv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod learners;
pub mod losses;
pub mod metrics;
pub mod objective;
pub mod regularizers;
pub mod sensitivity;
pub mod solver;

pub use error::{Error, Result};
