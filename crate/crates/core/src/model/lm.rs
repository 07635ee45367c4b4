//! The language-model surface the orchestrator drives.

use super::{forward_step, KvCache, TokenId, TransformerWeights};
use crate::attention::AggregationConfig;
use crate::error::Result;
use crate::memory::MemoryUnit;

/// Anything that can encode memory units and produce next-token logits while
/// attending to them. The transformer is the real implementation; tests plug in
/// scripted models.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Identifies the parameters behind cached encodings.
    fn fingerprint(&self) -> String;

    /// Encodes one memory unit in isolation at positions `0..tokens.len()`.
    fn encode_memory(&self, tokens: &[TokenId]) -> Result<KvCache>;

    /// Empty context cache whose first token sits at `start`.
    fn new_context(&self, start: usize) -> KvCache;

    /// Appends `new_tokens` to `context` and returns logits for the token after
    /// them. `history` is the full context token sequence, ending with `new_tokens`.
    fn step(
        &self,
        memory: &[&MemoryUnit],
        context: &mut KvCache,
        history: &[TokenId],
        new_tokens: &[TokenId],
        aggregation: AggregationConfig,
    ) -> Result<Vec<f64>>;
}

impl LanguageModel for TransformerWeights {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn fingerprint(&self) -> String {
        TransformerWeights::fingerprint(self)
    }

    fn encode_memory(&self, tokens: &[TokenId]) -> Result<KvCache> {
        super::encode(self, tokens, 0)
    }

    fn new_context(&self, start: usize) -> KvCache {
        let c = self.config;
        KvCache::new(c.n_layers, c.n_heads, c.d_model, start)
    }

    fn step(
        &self,
        memory: &[&MemoryUnit],
        context: &mut KvCache,
        _history: &[TokenId],
        new_tokens: &[TokenId],
        aggregation: AggregationConfig,
    ) -> Result<Vec<f64>> {
        let kvs: Vec<&KvCache> = memory.iter().map(|u| &u.kv).collect();
        forward_step(self, &kvs, context, new_tokens, aggregation)
    }
}
