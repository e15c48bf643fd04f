//! Small reverse-mode autodiff engine used by the watermarking models.
//!
//! Tensors are dense `f32`, single-sample (no batch axis). Convolutions use
//! im2col + sgemm; everything runs on the calling thread so results are
//! reproducible bit for bit.

pub mod conv;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use conv::Conv2dSpec;
pub use graph::{sigmoid, BackwardCtx, BackwardFn, Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
