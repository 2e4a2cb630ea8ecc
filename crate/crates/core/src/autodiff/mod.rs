//! Reverse-mode differentiation, optimisation and persistence of parameters.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorBlocks, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState, ParameterSet};
pub use tensor::Tensor;
