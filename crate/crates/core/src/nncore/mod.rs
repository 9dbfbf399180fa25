//! Layer primitives with explicit forward and backward passes.

mod activation;
mod adam;
mod batchnorm;
pub mod conv;
mod dropout;
pub mod gemm;
mod gradcheck;
mod layer;
mod layers;
mod scalar;
mod tensor;

pub use activation::{activation, ActKind, Activation};
pub use adam::{Adam, AdamConfig};
pub use batchnorm::{BatchNorm2d, BN_EPSILON, BN_MOMENTUM};
pub use conv::{conv2d, conv2d_transpose, conv2d_transpose_to, ConvGeometry};
pub use dropout::{dropout, Dropout};
pub use gradcheck::{grad_check, grad_check_fn, GradCheckOptions, GradCheckReport};
pub use layer::{param_count, param_digest, tensor_names, zero_grads, Ctx, Layer, Mode, Param};
pub use layers::{Conv2d, Op, Sequential};
pub use scalar::Scalar;
pub use tensor::Tensor;
