//! Small pre-norm decoder-only transformer with learned positions.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod generate;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, TensorFile};
pub use config::ModelConfig;
pub use forward::{forward, forward_batch, forward_with, loss_and_grad, nll_loss, Batch, Gradients};
pub use generate::{generate, GenerateOptions, Sampling};
pub use optim::{AdamW, AdamWConfig};
pub use params::{LayerParams, ParamSet};
pub use tensor::{Matrix, Real};
