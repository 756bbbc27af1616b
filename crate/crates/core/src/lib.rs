//! Smooth multi-policy longitudinal causal estimation.

pub mod bench;
pub mod data;
pub mod dgp;
pub mod embed;
pub mod error;
pub mod ice;
pub mod net;
mod par;
pub mod rng;
pub mod target;
pub mod train;

pub use error::{Error, Result};
