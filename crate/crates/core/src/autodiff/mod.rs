//! Tensor engine with reverse-mode differentiation, the loss primitives the
//! selector needs, SGD/Adam, and a finite-difference oracle.

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_EPS};
pub use graph::{Graph, Var};
pub use optim::{AdamHyper, OptimizerKind, OptimizerState, DEFAULT_LEARNING_RATE};
pub use params::{ParamId, ParamStore};
