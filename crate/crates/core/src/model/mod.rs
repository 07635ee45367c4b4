//! Decoder-only transformer: weights, tokenizer, caches, forward passes and training.

mod config;
pub mod flat;
pub mod forward;
mod kv;
pub mod layers;
mod lm;
pub mod sampling;
mod tokenizer;
pub mod train;
mod weights;

pub use config::ModelConfig;
pub use flat::TrainingExample;
pub use forward::{encode, forward_step};
pub use kv::{KvCache, LayerKv};
pub use lm::LanguageModel;
pub use sampling::{argmax, sample_next, token_stats, Sampler, SamplingPolicy};
pub use tokenizer::{push_word, TokenId, Tokenizer, ABBREVIATIONS, BOS, EOS, UNK};
pub use train::{mean_loss, train, Optimizer, TrainConfig, TrainOutcome};
pub use weights::{LayerWeights, TransformerWeights};
