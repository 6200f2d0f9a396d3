//! Dense tensors with reverse-mode differentiation over a recorded tape.

mod kernels;
mod tape;
mod tensor;

pub use kernels::{matmul, softmax_channels as softmax_channels_raw, Conv3dGeom};
pub use tape::{CustomOp, DropoutMode, Tape, Var};
pub use tensor::{Real, Tensor};

/// Direct convolution on raw buffers, exposed for oracles and benchmarks.
pub fn conv3d_raw<T: Real>(geom: &Conv3dGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    kernels::conv3d_forward(geom, input, kernel, bias)
}
