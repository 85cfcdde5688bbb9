//! Dense `f64` arrays, reverse-mode differentiation, seeded random streams
//! and the optimizers used by pretraining and finetuning.

mod graph;
pub mod gradcheck;
pub mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{Graph, Var};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use params::{Bound, Gradients, ParamStore};
pub use rng::{RngStream, StreamKind};
pub use tensor::{conv1d, conv1d_out_len, layer_norm, matmul, softmax, Tensor};
