//! Locally constrained compact point-cloud model.
//!
//! Masked point modeling with a local-aggregation encoder and a selective
//! state-space decoder, a Transformer baseline, analytic cost counters, and
//! the numerical machinery they share (tensors, reverse-mode tape, geometry).
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! two precisions actually used: `f32` for training, `f64` for checks.

pub mod cost;
pub mod checks;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod mpm;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
