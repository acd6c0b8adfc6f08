//! Dense tensors, tape-based reverse-mode differentiation, and the layer,
//! distribution and optimizer pieces needed to train small RSSM world models.
//!
//! Everything is CPU-only and deterministic: the same seed and inputs produce
//! bit-identical values and gradients.

pub mod checkpoint;
pub mod dist;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::Checkpoint;
pub use dist::{categorical_kl, categorical_sample_st, cosine_sim, cosine_sim_eps, group_probs, kl_balanced, SampleMode};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_inputs, grad_check_owned, GradCheckReport};
pub use graph::{symexp, symlog, Gradients, Graph, Var};
pub use nn::{Activation, Dense, DenseStack, GruCell};
pub use optim::{adam_step, AdamConfig, OptimState, StepStats};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
