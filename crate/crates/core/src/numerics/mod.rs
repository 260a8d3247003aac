//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{all_coords, finite_diff_grad, relative_error, sample_coords, Coord};
pub use graph::{Graph, Var};
pub use optim::{adamw_step, grad_norm, AdamWConfig, OptimState};
pub use params::{ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
