//! Tensors, differentiable primitives and reverse-mode autodiff.

pub mod gradcheck;
pub mod kernels;
mod ops;
mod param;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use ops::{
    bicubic_resize, invert_permutation, pixel_shuffle_index, Activation, PoolKind, SoftmaxMask, GATHER_ZERO,
    LEAKY_SLOPE,
};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tape::{AutodiffTape, Gradients};
pub use tensor::{NodeRef, Tensor};

/// Layer-norm epsilon used by every normalization layer.
pub const LN_EPS: f64 = 1e-5;
