//! Frozen decoder-only text encoder.

mod mask;
mod model;
mod tokenizer;

pub use mask::{densify, AttentionMask, CausalMask};
pub use model::{FrozenLm, KvCache, LayerWeights, LmConfig, LmPreset, DEFAULT_LM_SEED, LN_EPS};
pub use tokenizer::{
    detokenize, token_text, tokenize, tokenize_raw, TokenSeq, BOS, MIN_VOCAB, PAD,
};
