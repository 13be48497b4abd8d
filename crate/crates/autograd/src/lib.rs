//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! Everything is `f64` and single-threaded so that gradients can be checked
//! against finite differences and training runs replay bit-for-bit.

mod conv;
mod graph;
mod ops;
mod param;

pub use conv::Conv2dGeometry;
pub use graph::{Gradients, Graph, Tensor, Var};
pub use ops::mirror_last2;
pub use param::{Param, ParamId};
