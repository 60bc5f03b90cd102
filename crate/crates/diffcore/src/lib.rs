//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operator set is closed: add, mul, matmul, conv2d, relu, linear,
//! l2_normalize, cosine_similarity, softmax, cross_entropy, exp, clamp, sum,
//! mean, stack and reshape. Anything else enters through [`Function`] and
//! must come with its own finite-difference test.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod linalg;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use graph::{Function, Gradients, Graph, Var, NORM_EPS};
pub use tensor::Tensor;
