//! Minimal tape-based autodiff used by every trainable component.

mod graph;
pub mod gradcheck;
mod params;

pub use graph::{elu, sigmoid, softmax, softmax_in_place, Gradients, Graph, Mat, Var};
pub use params::{Adam, GradStore, ParamStore, TensorRecord};
