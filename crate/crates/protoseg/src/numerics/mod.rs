//! Minimal differentiable-tensor substrate.
//!
//! [`tensor`] provides dense HWC tensors generic over `f32`/`f64`; [`graph`]
//! is a small eager reverse-mode autodiff tape; [`ops`] holds the numeric
//! kernels (convolution, pooling, bilinear resize, softmax, pointwise ops);
//! [`gradcheck`] verifies analytic gradients against central differences.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use gradcheck::{gradcheck, GradCheckReport};
pub use graph::{Graph, Op, OpCtx, Tx};
pub use ops::{avg_pool2, bilinear_resize, conv2d, conv_output_size, softmax_channels};
pub use tensor::{num, Scalar, Tensor};
