//! Continual learning with task-specific low-rank adapters mixed by an
//! attentional selector.

pub mod adapters;
pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod model;
pub mod ortho;
pub mod rng;
pub mod selector;
pub mod tensor;

pub use adapters::{AdapterStack, LoraAdapter};
pub use baselines::{MethodName, MethodSpec};
pub use autodiff::{Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, MetricsReport};
pub use model::{build_model, AdapterRule, Batch, Mode, Model, ModelConfig, Site};
pub use selector::{AttentionalSelector, GateVector, SelectorVariant};
pub use tensor::Tensor;
