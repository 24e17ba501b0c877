//! Minimal reverse-mode differentiation: tensors, a recording tape,
//! named parameter stores, Adam, and the checkpoint container.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_MAGIC,
};
pub use graph::{Graph, Var};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
