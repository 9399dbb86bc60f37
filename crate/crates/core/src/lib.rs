//! Neural energy-minimization solver for p-Laplacian obstacle problems.

pub mod cli;
pub mod energy;
pub mod error;
pub mod geodata;
pub mod metrics;
pub mod nnet;
pub mod oracle;
pub mod optim;
pub mod problems;

pub use error::{Error, Result};
