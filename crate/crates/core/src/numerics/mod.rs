//! Dense tensors, reverse-mode autodiff, layers and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{NamedTensor, ParamGrads, ParamId, ParamStore, Session};
pub use tensor::{inverse_sigmoid, sigmoid, softmax, Tensor};
