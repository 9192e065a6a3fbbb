//! Dense tensor arithmetic with reverse-mode differentiation.
//!
//! The op set is exactly what the adapter assembly needs: matrix products
//! (plain and batched, with transpose flags), layer norm, stable softmax
//! with additive attention masks, ReLU, fused cross-entropy, embedding
//! gathers and a handful of shape/reduction ops. Values default to `f32`;
//! every routine is generic over [`Scalar`] so verification runs (gradient
//! checks against finite differences) can use `f64`.
//!
//! Tensors are immutable once produced by an op. A [`Graph`] records the
//! forward pass as an arena in topological order; [`Graph::backward`]
//! walks it in reverse, accumulating gradients in a fixed order so runs
//! are bit-reproducible under a fixed seed.

mod graph;
mod scalar;
mod tensor;

pub use graph::{Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::Tensor;
