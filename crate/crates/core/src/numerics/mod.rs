//! Dense tensors, linear algebra helpers, normalization and the gradient-check harness.

pub mod gradcheck;
mod linear;
pub mod ops;
pub mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use linear::{linear_forward, LinearLayer};
pub use ops::{layer_norm, softmax, LayerNorm};
pub use params::Params;
pub use scalar::{axpy, dot, Precision, Scalar};
pub use tensor::Tensor;
