//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod array;
mod gradcheck;
mod graph;
mod params;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport, Probe};
pub use graph::{Graph, Var};
pub use params::{Bound, ParamSet};

#[cfg(test)]
mod tests;
