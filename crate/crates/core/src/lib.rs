//! Kernel-thinned non-parametric regression.

pub mod bench;
pub mod data;
pub mod error;
pub mod kernels;
pub mod regression;
pub mod rng;
pub mod thinning;

pub use error::{Error, Result};
