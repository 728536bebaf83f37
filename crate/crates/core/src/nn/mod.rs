//! Minimal reverse-mode autodiff over dense 5-D tensors.

pub mod check;
mod checkpoint;
mod graph;
mod ops;
mod tensor;

pub use checkpoint::ParamSet;
pub use graph::{BackwardCtx, BackwardFn, Graph, Var};
pub use ops::attention::GateVars;
pub use ops::conv::ConvSpec;
pub use ops::loss::{BCE_CLAMP, NCC_EPS};
pub use tensor::Tensor;
