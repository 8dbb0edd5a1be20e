//! Scale-aware fusion block: a convolutional local branch and a cosine-attention
//! global branch that gate each other (spatially and per channel) before a
//! residual 1×1 fusion.

mod block;
mod checkpoint;
mod config;
mod params;

pub use block::{
    attention_weights, channel_guidance, cosine_attention, cosine_attention_head, from_tokens,
    fuse, global_branch, local_branch, sfm_forward, spatial_guidance, to_tokens, SfmTrace,
};
pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor, CHECKPOINT_SCHEMA_VERSION};
pub use config::SfmConfig;
pub use params::{param_count, SfmParams, SfmVars, SfmWeights};
