//! Differentiable numeric kernel: dense tensors, the forward operations the
//! two networks need, and exact reverse-mode gradients.

mod params;
mod scalar;
mod tape;
mod tensor;

pub mod gradcheck;

pub use params::{Param, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tape::{Tape, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

/// Leaky-ReLU negative slope used throughout both networks.
pub const LEAKY_SLOPE: f64 = 0.01;
