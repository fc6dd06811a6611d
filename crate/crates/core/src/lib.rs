//! Permutation-based sensitivity analysis for matched observational studies.
//!
//! The crate is `no_std` with `alloc`: matching, score computation, density
//! models, worst-case p-value engines, oracles and the simulation models are
//! all pure computation. File formats, the CLI and parallel simulation live
//! in the `matchsens` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod density;
pub mod error;
pub mod matcher;
pub mod math;
pub mod oracle;
pub mod rng;
pub mod scores;
pub mod sensearch;
pub mod sim;

pub use error::{Error, Result};
