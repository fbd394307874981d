//! Dense `f32` tensors with reverse-mode automatic differentiation.
//!
//! Every operation records an adjoint rule when one of its inputs requires
//! grad. `Tensor::backward` replays the recorded tape in reverse creation
//! order and accumulates into the `grad` of every trainable leaf.

mod error;
mod ops;
mod rng;
mod tensor;

#[cfg(feature = "test-support")]
pub mod gradcheck;

pub use error::{Result, TensorError};
pub use ops::conv::Conv1dSpec;
pub use rng::SeededRng;
pub use tensor::{is_grad_enabled, no_grad, Tensor};
