//! Minimal differentiable building blocks: tensors, a reverse-mode tape,
//! transformer layers, optimizers and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GraphObjective, Objective};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use layers::{Decoder, Dims, Encoder, Linear};
pub use optim::{learning_rate, Optimizer, OptimizerKind, SchedulerKind};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
