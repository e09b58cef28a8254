//! The causal transformer that generates grid tokens in context, its
//! training loops and the LoRA baseline.

mod infer;
mod params;
mod train;

pub use infer::{
    forward_logits, generate, generate_from_prefix, perplexity, perplexity_with, pick_token, Session,
};
pub use params::{BackboneConfig, BackboneParams, LayerParams, LoraAdapters, LoraLayer, EMBED_INIT_STD, INIT_STD, POS_INIT_STD};
pub(crate) use params::fingerprint;
pub use train::{
    episode_loss, pretrain, taped_episode_loss, taped_logits, train_lora, BackboneVars, LoraOptions,
    PretrainOptions, WEIGHT_DECAY,
};
