pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod monitors;
pub mod noise;
pub mod rng;
pub mod stepper;

pub use error::{Error, Result};
