//! Solver and verification harness for mean field games with one major and
//! many minor agents.

pub mod catalog;
pub mod cli;
pub mod fbsde;
pub mod error;
pub mod hamiltonian;
pub mod lq_oracle;
pub mod model;
pub mod nash;
pub mod regression;
pub mod stochastics;

pub use error::{MfgError, Result};
