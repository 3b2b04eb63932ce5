//! Vision transformer with per-block sparsification hooks.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use forward::{
    attention_forward, block_forward, model_forward, patchify_embed, AttentionOutput, BlockContext, BlockMasks,
    BlockOutput, BlockUsage, ForwardOptions, ForwardOutput, Gates, Selection, TokenSparsifier, Trace, LN_EPS,
};
pub use params::{BlockParams, DecisionParams, Extras, HaltingParams, ModelParams, ModelWeights};
