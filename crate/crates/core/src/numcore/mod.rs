//! Dense tensors, a reverse-mode tape, and finite-difference checking.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{gelu, gelu_grad, layer_norm, normal_cdf, sigmoid, softmax, LAYER_NORM_EPS};
pub use params::{Bound, ParamId, ParamSet};
pub use rng::{SeedTree, StreamRng};
pub use tensor::{matmul, Tensor};
