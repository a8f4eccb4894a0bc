//! MGT residual blocks (tangent-projected gating plus data-dependent delta
//! updates) and a deterministic desk-scale experiment harness.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{AttentionLayout, Gradients, Tape, Var};
pub use config::{ExperimentConfig, TaskKind};
pub use error::{MgtError, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::Tensor;
