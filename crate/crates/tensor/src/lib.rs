//! Dense `f64` tensors recorded on a reverse-mode differentiation tape,
//! together with the neural primitives and the optimizer used by the
//! recognizer.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{CustomOp, Graph, Var};
pub use optim::{adam_step, clip_by_global_norm, clip_gradients, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
