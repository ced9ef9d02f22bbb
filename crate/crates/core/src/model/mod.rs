//! Micro decoder-only transformer.

pub mod checkpoint;
pub mod kernels;
pub mod real;
mod state;
mod transformer;

pub use checkpoint::{
    decode_container, encode_container, load_model, read_container, save_model, write_container, TocEntry,
};
pub use real::Real;
pub use state::{
    base_shapes, init_model, AdapterSlot, DType, GradSet, LoraState, ModelConfig, ModelState, Param, Proj,
    Storage, Weights,
};
pub(crate) use state::{base_len, gaussian, idx_proj};
pub use transformer::{
    backward, backward_checkpointed, block_bounds, clm_loss, dropout_key, forward, ActivationMeter, Grads,
};
