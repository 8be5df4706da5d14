//! Multiscale kinetic transport simulation and symbolic PDE discovery.
//!
//! The crate generates trajectories of the micro-macro linear transport
//! system and recovers the governing equations from them with a
//! multiscale operator-composition network fitted through IMEX residuals.

pub mod error;
pub mod grid;
pub mod operators;
pub mod solver;
pub mod symnet;
pub mod fitloss;
pub mod extract;
pub mod train;
pub mod baselines;
pub mod cli;

pub use error::{Error, Result};
