//! Deterministic `f64` tensor core with tape-based reverse-mode
//! differentiation, AdamW, a warmup/cosine learning-rate schedule, seeded
//! random streams and finite-difference gradient checking.

mod check;
mod error;
mod graph;
mod kernels;
pub mod nn;
mod optim;
mod params;
mod rng;
mod schedule;
mod tensor;

pub use check::{grad_check, grad_check_params};
pub use error::{GradError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, clip_grad_norm, OptimState};
pub use params::{glorot_uniform, normal_init, ParamId, ParamStore};
pub use rng::Rng;
pub use schedule::lr_schedule;
pub use tensor::Tensor;
