//! Differentiable kernels, exposed as methods on [`Tape`](crate::Tape).

mod activation;
mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod sample;
mod shape;
mod softmax;

pub use activation::{gelu_grad_scalar, gelu_scalar};
pub use linalg::gemm;
pub use sample::{bilinear_taps, resize_source};
pub use shape::permute_raw;
