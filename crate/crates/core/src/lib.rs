pub mod cli;
pub mod deviation;
pub mod error;
pub mod exposure;
pub mod mc;
pub mod retention;
pub mod rise;
pub mod rng;
pub mod sandbox;
pub mod shaping;
pub mod stats;
pub mod symkernel;

pub use error::{Error, Result};
