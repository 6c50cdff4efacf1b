//! Exact, sampled and amortized Shapley value explanations for tabular classifiers.

pub mod data;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod exact;
pub mod fastshap;
pub mod game;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod surrogate;
pub mod valuefn;

pub use error::{Error, Result};
