//! The VGG-style fully-convolutional classifier and its weight storage.

pub mod config;
pub mod container;
pub mod forward;
pub mod weights;

pub use config::{Block, HeadLayer, ModelConfig, ParamSpec, CLASS_NAMES};
pub use container::{load_weights, load_weights_permissive, save_weights, ImportReport};
pub use forward::{forward, forward_logits, predict_proba, ForwardOutput, ParamVars, Prediction};
pub use weights::ModelWeights;
