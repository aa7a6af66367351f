//! Parallel scale-wise attention network for scene-text recognition, with
//! the tensor, autodiff and training machinery it runs on.

pub mod charset;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod merging;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod train;

pub use charset::Charset;
pub use config::{Config, Precision};
pub use error::{Error, Result};
pub use model::Psan;
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
