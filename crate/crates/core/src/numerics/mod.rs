//! Dense tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Graph`]: every op appends a node holding its output, and
//! [`Graph::backward`] walks the nodes in reverse creation order to produce
//! [`Gradients`]. A graph lives for one training step.
//!
//! All kernels are single-threaded with a fixed reduction order, so identical
//! inputs give bit-identical outputs.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type of tensors and graphs.
///
/// Implemented for `f64` (gradient checks, reference numerics) and `f32`
/// (training).
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_f32(x: f32) -> Self {
        Self::from_f64(x as f64)
    }
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}
