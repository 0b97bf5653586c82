//! Neural divide-and-conquer reasoning head for image retrieval from
//! compound text.
//!
//! A compound query is split into proposition slots, each slot is scored
//! against every candidate image (System 1), the per-proposition states are
//! combined by a neural-symbolic reasoner with negation and gated conjunction
//! (System 2), and both systems are fused into the final ranking.
//!
//! The crate also ships the reverse-mode engine the model runs on, a
//! synthetic compositional benchmark, and the binary file formats.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod io;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use model::{Arch, LossConfig, ModelConfig, Ndcr};
pub use optim::{adam_step, Gradients, OptimizerConfig};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
pub use train::{evaluate, train, Ablation, EvalReport, TrainConfig};
