pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod inner_opt;
pub mod nn;
pub mod oracles;
pub mod problems;
pub mod rollout;
pub mod solvers;
pub mod tensor;

pub use autodiff::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
