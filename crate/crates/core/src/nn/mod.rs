//! Layers, reference models, the Adam optimizer, and the training step.

pub mod augment;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use augment::augment;
pub use layers::{BackwardCtx, ConvRecord, Layer, ParamRef};
pub use loss::softmax_cross_entropy;
pub use model::{build_model, ConvInfo, ModelName, Network};
pub use optim::{adam_update, Adam, AdamConfig};
pub use train::{evaluate, StepStats, Trainer};
