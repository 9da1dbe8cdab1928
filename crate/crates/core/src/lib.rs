//! Cross-location contrastive knowledge transfer for wearable activity
//! recognition.

pub mod archive;
pub mod dataset;
pub mod evaluation;
pub mod experiment;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod training;

pub use numerics::{Graph, Real, Tensor, Var};
