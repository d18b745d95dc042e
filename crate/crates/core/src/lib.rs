pub mod cli;
pub mod cohort;
pub mod curves;
pub mod error;
pub mod fitter;
pub mod metrics;
pub mod progression;
pub mod resampling;
pub mod robust_loss;
pub mod staging;
mod solver;
pub mod synth;

pub use error::{Error, Result};
