//! The sample embedding model: configuration, parameters, forward and
//! backward passes, and checkpoints.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{
    hex_digest, load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointMeta, META_FILE,
    PARAMS_FILE,
};
pub use config::{Activation, Features, ModelConfig};
pub use params::{param_count, Layout, Parameters, Scalar, TensorSpec};
