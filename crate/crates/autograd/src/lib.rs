//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated eagerly. Calling
//! [`Graph::backward`] on a scalar node returns [`Gradients`] for every node
//! reachable from a trainable leaf. Spatial maps use channel-last layout
//! (`[batch, height, width, channels]`).

mod conv;
mod elementwise;
pub mod gradcheck;
mod graph;
mod linalg;
mod norm;
mod scalar;
mod shape;

pub use conv::{ConvGeom, PoolGeom};
pub use graph::{Gradients, Graph, Tensor, Var};
pub use norm::BatchStats;
pub use scalar::Scalar;
