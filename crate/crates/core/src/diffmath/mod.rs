//! Dense 2-D tensors with reverse-mode differentiation, Adam, and a
//! finite-difference oracle.

pub mod fdcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;

pub use fdcheck::{finite_diff_check, FdOptions, FdReport, Objective};
pub use graph::{Gradients, Graph, InterpPlan, Mat, Var};
pub use optim::{adam_step, AdamHyper, OptimizerState};
pub use params::{GroupName, ParamGroup, ParamKey};
pub use real::Real;
pub use tensor::Tensor;
