//! Dataset distillation with random-feature approximations of the NNGP kernel.
//!
//! The crate is generic over the floating point type through [`Scalar`];
//! `f32` and `f64` are provided. Aliases at the root fix the common choices.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod interpret;
pub mod kernel;
pub mod krr;
pub mod networks;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod transfer;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single precision, used for forward passes and distillation.
pub type Real = f32;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Ensemble32 = networks::NetworkEnsemble<f32>;
pub type Ensemble64 = networks::NetworkEnsemble<f64>;
