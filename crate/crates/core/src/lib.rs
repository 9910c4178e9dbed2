//! Simulation and numerics for critical branching random walks.

pub mod acceptance;
pub mod cli;
pub mod emptyball;
pub mod engine;
pub mod error;
pub mod laws;
pub mod maxdisp;
pub mod parallel;
pub mod rng;
pub mod sbmpde;
pub mod special;
pub mod spine;
pub mod stats;

pub use error::{Error, Result};
