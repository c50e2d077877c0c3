pub mod cli;
pub mod error;
pub mod evaluation;
pub mod manipulator;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objective;
pub mod perturbation;
pub mod store;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
