pub mod autodiff;
pub mod backbone;
pub mod cascade;
pub mod checks;
pub mod geometry;
pub mod metrics;
mod error;
pub mod rng;
pub mod shapegen;
pub mod training;

pub use error::{Error, Result};
