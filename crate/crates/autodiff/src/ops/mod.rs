//! Differentiable operations on [`Var`](crate::Var).

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod nn;
pub mod reduce;
pub mod shape;
pub mod spectral;
