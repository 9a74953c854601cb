//! Minimal bit-flip fault search for small int8 networks, with baseline
//! attacks, SECDED memory protection and a statistical fault detector.

pub mod baselines;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod fault;
pub mod harness;
pub mod model;
pub mod nn;
pub mod profile;
pub mod rl;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
