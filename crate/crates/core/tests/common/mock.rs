//! A scripted language model for orchestrator tests.
//!
//! The script is a list of fact sentences. At an object slot the model emits the
//! true object when that token appears in any memory unit, otherwise the
//! corrupted one. After the script it emits EOS.

use std::sync::atomic::{AtomicUsize, Ordering};

use ewe_core::attention::AggregationConfig;
use ewe_core::curriculum::{build_tokenizer, prompt_tokens};
use ewe_core::memory::MemoryUnit;
use ewe_core::model::{KvCache, LanguageModel, TokenId, Tokenizer, EOS};
use ewe_core::toyworld::{generate_world, FactTriple, World, WorldSpec};
use ewe_core::Result;

#[derive(Debug, Clone)]
pub struct ScriptedSentence {
    pub tokens: Vec<TokenId>,
    pub slot: usize,
    pub truth: TokenId,
    pub wrong: TokenId,
}

pub struct MockLm {
    pub vocab: usize,
    pub prompt_len: usize,
    pub script: Vec<ScriptedSentence>,
    /// Per-entity scripts, chosen by the entity token in the prompt; overrides `script`.
    pub by_entity: Vec<(TokenId, Vec<ScriptedSentence>)>,
    /// Logit of the chosen token at object slots; every other logit is 0.
    pub object_margin: f64,
    /// Logit of the chosen token elsewhere.
    pub margin: f64,
    /// Whether memory can fix the object.
    pub reads_memory: bool,
    pub offset: usize,
    pub calls: AtomicUsize,
}

impl MockLm {
    fn next(&self, memory: &[&MemoryUnit], history: &[TokenId]) -> (TokenId, bool) {
        let prompt = &history[..self.prompt_len];
        let script = self
            .by_entity
            .iter()
            .find(|(e, _)| prompt.contains(e))
            .map_or(&self.script, |(_, s)| s);
        let mut n = history.len() - self.prompt_len;
        for s in script {
            if n < s.tokens.len() {
                if n == s.slot {
                    let known = self.reads_memory && memory.iter().any(|u| u.tokens.contains(&s.truth));
                    return (if known { s.truth } else { s.wrong }, true);
                }
                return (s.tokens[n], false);
            }
            n -= s.tokens.len();
        }
        (EOS, false)
    }
}

impl LanguageModel for MockLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn fingerprint(&self) -> String {
        "mock".into()
    }

    fn encode_memory(&self, tokens: &[TokenId]) -> Result<KvCache> {
        let mut kv = KvCache::new(0, 1, 1, 0);
        kv.extend_positions(tokens.len())?;
        Ok(kv)
    }

    fn new_context(&self, start: usize) -> KvCache {
        KvCache::new(0, 1, 1, start)
    }

    fn step(
        &self,
        memory: &[&MemoryUnit],
        context: &mut KvCache,
        history: &[TokenId],
        new_tokens: &[TokenId],
        _aggregation: AggregationConfig,
    ) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        assert!(history.ends_with(new_tokens));
        context.extend_positions(new_tokens.len())?;
        assert_eq!(context.len(), history.len(), "context cache out of sync with history");
        assert_eq!(context.start(), self.offset);
        for u in memory {
            assert_eq!(u.kv.positions(), (0..u.tokens.len()).collect::<Vec<_>>().as_slice());
        }
        let (token, at_slot) = self.next(memory, history);
        let mut logits = vec![0.0; self.vocab];
        logits[token as usize] = if at_slot { self.object_margin } else { self.margin };
        Ok(logits)
    }
}

pub struct Fixture {
    pub world: World,
    pub tokenizer: Tokenizer,
    pub entity: String,
    pub facts: Vec<FactTriple>,
}

pub fn fixture(n_facts: usize) -> Fixture {
    let world = generate_world(&WorldSpec {
        seed: 21,
        n_entities: 8,
        ..WorldSpec::default()
    })
    .unwrap();
    let tokenizer = build_tokenizer(&world);
    let entity = world.entities[0].clone();
    let facts = world.facts_of(&entity).into_iter().take(n_facts).cloned().collect();
    Fixture {
        world,
        tokenizer,
        entity,
        facts,
    }
}

impl Fixture {
    pub fn wrong(&self, f: &FactTriple) -> FactTriple {
        let o = self.world.domains[&f.relation].iter().find(|o| **o != f.object).unwrap();
        FactTriple::new(&f.subject, &f.relation, o)
    }

    pub fn sentence(&self, f: &FactTriple) -> String {
        self.world.render(f).unwrap()
    }

    pub fn prompt(&self) -> String {
        ewe_core::toyworld::prompt_for(&self.entity)
    }

    fn script(&self, facts: &[FactTriple]) -> Vec<ScriptedSentence> {
        facts
            .iter()
            .map(|f| {
                let tokens = self.tokenizer.tokenize(&self.sentence(f));
                let wrong = self.tokenizer.tokenize(&self.sentence(&self.wrong(f)));
                let slot = tokens.iter().zip(&wrong).position(|(a, b)| a != b).unwrap();
                ScriptedSentence {
                    truth: tokens[slot],
                    wrong: wrong[slot],
                    tokens,
                    slot,
                }
            })
            .collect()
    }

    pub fn model(&self, offset: usize, reads_memory: bool) -> MockLm {
        MockLm {
            vocab: self.tokenizer.vocab_size(),
            prompt_len: prompt_tokens(&self.tokenizer, &self.entity).unwrap().len(),
            script: self.script(&self.facts),
            by_entity: Vec::new(),
            object_margin: 20.0,
            margin: 20.0,
            reads_memory,
            offset,
            calls: AtomicUsize::new(0),
        }
    }

    /// A model scripted for every entity with its first `n_facts` facts.
    pub fn world_model(&self, offset: usize, n_facts: usize) -> MockLm {
        let mut lm = self.model(offset, true);
        lm.by_entity = self
            .world
            .entities
            .iter()
            .map(|e| {
                let facts: Vec<FactTriple> = self.world.facts_of(e).into_iter().take(n_facts).cloned().collect();
                (self.tokenizer.id(e).unwrap(), self.script(&facts))
            })
            .collect();
        lm
    }
}
