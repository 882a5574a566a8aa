//! A small reverse-mode automatic differentiation engine over dense tensors.
//!
//! Values live on a per-step [`Graph`] tape; each op records a closure that
//! maps the output gradient to input gradients. Trainable tensors live in a
//! [`ParamStore`] and enter a graph by id, which is how several model paths
//! share one set of weights.

mod graph;
mod ops;
mod scalar;
mod tensor;

pub mod gradcheck;
pub mod optim;
pub mod params;

pub use graph::{GradSink, Gradients, Graph, Var};
pub use ops::{log_softmax, softmax, Conv2dGeometry};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{broadcast_shape, numel, strides, Tensor};
