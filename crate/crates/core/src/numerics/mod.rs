//! Tensors, differentiable primitives, and gradient checking.
//!
//! Tensors are plain `ndarray` arrays over a [`Real`] scalar. The module has
//! two layers:
//!
//! * [`ops`]: stateless forward kernels (patch convolution, multi-head
//!   attention, layer norm, activations). These are the reference surface;
//!   oracle tests compare them against brute-force loop implementations.
//! * [`tape`]: a reverse-mode autodiff tape built from the same kernels. The
//!   backward pass visits each recorded op exactly once and accumulates
//!   gradients additively at fan-out.
//!
//! [`gradcheck`] closes the loop: every primitive's analytic gradient is
//! validated against central finite differences in `f64`.

pub mod dropout;
pub mod gradcheck;
pub mod ops;
pub mod real;
pub mod tape;

pub use dropout::{dropout_mask, stochastic_depth_gate, Mode};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{conv1d, gelu, layer_norm, multi_head_attention, relu, softmax_rows, AttentionParams};
pub use real::{Precision, Real};
pub use tape::{GradTape, NodeId};

use ndarray::ArrayD;

/// N-dimensional tensor. Precision is the element type.
pub type Tensor<T> = ArrayD<T>;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Finiteness contract check. NaN or Inf anywhere is a hard error.
pub fn ensure_finite<T: Real>(x: &ArrayD<T>, context: &str) -> Result<(), NumericsError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite(context.to_string()))
    }
}
