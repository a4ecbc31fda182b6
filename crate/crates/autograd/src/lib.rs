//! Minimal reverse-mode automatic differentiation for the findkit models.
//!
//! Tensors are dense and row-major. Convolutions use `[C, H, W]` layout, token and
//! sequence features use `[S, D]`. Every op is generic over [`Scalar`] so the same
//! model code trains in `f32` and is gradient-checked in `f64`.

pub mod check;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, RoiSample, Var};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
