//! A small decoder-only transformer language model, written from scratch.
//!
//! The pipeline is tokenize → embed → add positions → residual blocks →
//! prediction head → sample:
//!
//! - [`tokenizer`]: byte-level BPE, merge learning, JSON vocabulary files
//! - [`model`]: the forward pass (layer norm, GELU MLP, causal attention)
//! - [`generation`]: greedy / top-k sampling and KV-cached decoding
//! - [`training`]: cross-entropy, exact gradients, SGD
//! - [`checkpoint`]: binary parameter files keyed to a vocabulary hash

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod generation;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use config::{ModelConfig, PosMode};
pub use error::{CheckpointError, Error, Result};
pub use generation::{
    generate, next_token_distribution, sample_greedy, sample_top_k, GenerationConfig, KvCache, Sampler, StopMode,
};
pub use model::{forward, forward_all_positions};
pub use params::{GradientSet, Parameters};
pub use tokenizer::{bpe_train, TokenId, TokenSequence, Vocabulary};
pub use training::{backward, batch_loss, cross_entropy, sgd_step, train, TrainConfig, TrainReport};
