//! Differentiable operations recorded on the [`crate::tape::Tape`].

pub mod conv;
pub mod dense;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;
