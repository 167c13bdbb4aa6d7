//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records ops as they execute; [`Tape::backward`] sweeps it in
//! reverse. Storage is generic over [`Real`] so the same graph code can run in
//! `f32` for training and `f64` for finite-difference checks.

pub mod error;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::conv_out_len;
pub use optim::{Adam, AdamConfig};
pub use param::ParamSet;
pub use scalar::Real;
pub use tape::{sigmoid, softplus, Gradients, Reduce, Tape, Unary, Var};
pub use tensor::Tensor;
