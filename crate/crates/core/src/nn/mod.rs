//! Dense tensors, tape autodiff, attention blocks, Adam and checkpoints.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, OptimizerState};
pub use attention::{
    graph_attention, graph_attention_on, multi_head_attention, multi_head_attention_on, AttentionParams,
    AttentionVars,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2;
