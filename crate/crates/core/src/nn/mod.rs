//! The noise-prediction network, its reverse pass, low-rank adapters, the
//! optimizer and the checkpoint container.

pub mod checkpoint;
pub mod kernels;
pub mod lora;
pub mod model;
pub mod optim;

pub use checkpoint::{CheckpointHeader, CheckpointMeta};
pub use lora::{hidden_layer_targets, merge_adapter, LoraAdapter};
pub use model::{
    Activation, Architecture, DenoiserInput, DenoiserModel, EffectiveWeights, ForwardCache,
    GradientTape, ModelRole, OutputParam, TrainExample, Trainable,
};
pub use optim::{cosine_lr, opt_step, AdamState};
