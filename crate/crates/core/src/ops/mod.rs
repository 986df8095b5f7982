//! Forward and backward kernels shared by the tape and the plain evaluation paths.

pub mod conv;
pub mod linalg;
pub mod pool;
pub mod softmax;

pub use conv::{conv2d, conv2d_backward, conv2d_relu_avgpool2};
pub use linalg::{cholesky, cholesky_solve, solve_spd};
pub use pool::{avgpool2, avgpool2_backward, relu_avgpool2};
pub use softmax::{log_softmax_rows, softmax_cross_entropy, softmax_rows};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    x.zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() })
        .expect("relu grad shape")
}
