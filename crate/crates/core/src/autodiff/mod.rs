//! Reverse-mode automatic differentiation over dense `f64` tensors, with
//! Adam/AdamW and a finite-difference gradient checker.

mod batch;
mod check;
mod graph;
mod optim;
mod params;
mod tensor;

pub use batch::mean_grads;
pub use check::{finite_diff_check, finite_diff_check_params, DEFAULT_DELTA};
pub use graph::{bce_loss, gelu, sigmoid, Graph, Var, BCE_CLAMP, LAYER_NORM_EPS};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{seeded, Ctx, ParamId, ParamStore, SeedRng};
pub use tensor::{softmax_rows, Tensor};
