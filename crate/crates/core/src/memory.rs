//! Working memory: encoded feedback units held in FIFO pools.
//!
//! Every unit is encoded on its own at positions `0..token_count`, so units
//! never see each other and refreshing one pool leaves every other encoding
//! untouched. The orchestrator places the context after the memory span.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvCache, LanguageModel, TokenId, Tokenizer};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Retrieval,
    Factcheck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryUnit {
    pub id: u64,
    pub kind: FeedbackKind,
    pub source_text: String,
    /// Passage identifier when the unit holds a single datastore passage.
    pub source_id: Option<String>,
    pub tokens: Vec<TokenId>,
    pub kv: KvCache,
    pub inserted_at_step: usize,
}

impl MemoryUnit {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

/// Tokenizes `text`, keeps at most `unit_len` leading tokens and encodes them.
pub fn encode_unit(
    model: &dyn LanguageModel,
    tokenizer: &Tokenizer,
    text: &str,
    kind: FeedbackKind,
    step: usize,
    unit_len: usize,
    id: u64,
) -> Result<MemoryUnit> {
    let mut tokens = tokenizer.tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyFeedback);
    }
    tokens.truncate(unit_len);
    let kv = model.encode_memory(&tokens)?;
    Ok(MemoryUnit {
        id,
        kind,
        source_text: text.to_string(),
        source_id: None,
        tokens,
        kv,
        inserted_at_step: step,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPool {
    kind: FeedbackKind,
    capacity: usize,
    units: VecDeque<MemoryUnit>,
}

impl MemoryPool {
    pub fn new(kind: FeedbackKind, capacity: usize) -> Self {
        Self {
            kind,
            capacity,
            units: VecDeque::new(),
        }
    }

    pub fn kind(&self) -> FeedbackKind {
        self.kind
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Oldest first.
    pub fn units(&self) -> impl Iterator<Item = &MemoryUnit> {
        self.units.iter()
    }

    /// Appends `unit`; when the pool overflows the oldest unit is evicted and
    /// returned. A zero-capacity pool hands the unit straight back.
    pub fn push_fifo(&mut self, unit: MemoryUnit) -> Result<Option<MemoryUnit>> {
        if unit.kind != self.kind {
            return Err(Error::contract(format!(
                "{:?} unit pushed into {:?} pool",
                unit.kind, self.kind
            )));
        }
        self.units.push_back(unit);
        if self.units.len() > self.capacity {
            Ok(self.units.pop_front())
        } else {
            Ok(None)
        }
    }
}

/// Both pools plus the unit-ID counter.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingMemory {
    pub retrieval: MemoryPool,
    pub factcheck: MemoryPool,
    next_id: u64,
}

/// Deep copy of a [`WorkingMemory`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySnapshot(WorkingMemory);

impl WorkingMemory {
    pub fn new(retrieval_capacity: usize, factcheck_capacity: usize) -> Self {
        Self {
            retrieval: MemoryPool::new(FeedbackKind::Retrieval, retrieval_capacity),
            factcheck: MemoryPool::new(FeedbackKind::Factcheck, factcheck_capacity),
            next_id: 1,
        }
    }

    pub fn pool(&self, kind: FeedbackKind) -> &MemoryPool {
        match kind {
            FeedbackKind::Retrieval => &self.retrieval,
            FeedbackKind::Factcheck => &self.factcheck,
        }
    }

    pub fn pool_mut(&mut self, kind: FeedbackKind) -> &mut MemoryPool {
        match kind {
            FeedbackKind::Retrieval => &mut self.retrieval,
            FeedbackKind::Factcheck => &mut self.factcheck,
        }
    }

    pub fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn push(&mut self, unit: MemoryUnit) -> Result<Option<MemoryUnit>> {
        self.pool_mut(unit.kind).push_fifo(unit)
    }

    /// Retrieval units then fact-check units, each oldest first.
    pub fn units(&self) -> Vec<&MemoryUnit> {
        self.retrieval.units().chain(self.factcheck.units()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.retrieval.is_empty() && self.factcheck.is_empty()
    }

    /// Longest unit currently held.
    pub fn span(&self) -> usize {
        self.units().iter().map(|u| u.token_count()).max().unwrap_or(0)
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot(self.clone())
    }

    pub fn restore(&mut self, snapshot: &MemorySnapshot) {
        *self = snapshot.0.clone();
    }
}

/// Encodes several texts of one kind, possibly in parallel. IDs are assigned in input order.
pub fn encode_units(
    model: &dyn LanguageModel,
    tokenizer: &Tokenizer,
    memory: &mut WorkingMemory,
    texts: &[(String, Option<String>)],
    kind: FeedbackKind,
    step: usize,
    unit_len: usize,
    exec: Execution,
) -> Vec<Result<MemoryUnit>> {
    let ids: Vec<u64> = texts.iter().map(|_| memory.allocate_id()).collect();
    let jobs: Vec<(usize, &(String, Option<String>))> = texts.iter().enumerate().collect();
    par::map(exec, &jobs, |&(i, (text, source))| {
        let mut unit = encode_unit(model, tokenizer, text, kind, step, unit_len, ids[i])?;
        unit.source_id = source.clone();
        Ok(unit)
    })
}

#[derive(Debug, Clone)]
struct StoreEntry {
    fingerprint: String,
    kv: KvCache,
}

/// Cache of encodings for frequently retrieved passages, keyed by passage ID
/// and the fingerprint of the weights that produced them.
#[derive(Debug, Clone, Default)]
pub struct PrecomputeStore {
    entries: HashMap<String, StoreEntry>,
    hits: usize,
    misses: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreIndex {
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    passage_id: String,
    fingerprint: String,
    file: String,
}

impl PrecomputeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    /// Returns the cached encoding of `passage_id` when it was produced by the
    /// same weights, otherwise encodes `tokens` and replaces the entry.
    pub fn lookup_or_encode(
        &mut self,
        model: &dyn LanguageModel,
        passage_id: &str,
        tokens: &[TokenId],
    ) -> Result<(KvCache, bool)> {
        let fingerprint = model.fingerprint();
        if let Some(entry) = self.entries.get(passage_id) {
            if entry.fingerprint == fingerprint {
                self.hits += 1;
                return Ok((entry.kv.clone(), true));
            }
        }
        self.misses += 1;
        let kv = model.encode_memory(tokens)?;
        self.entries.insert(
            passage_id.to_string(),
            StoreEntry {
                fingerprint,
                kv: kv.clone(),
            },
        );
        Ok((kv, false))
    }

    /// Writes one binary KV file per entry plus `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        let mut index = StoreIndex { entries: Vec::new() };
        for (i, key) in keys.into_iter().enumerate() {
            let entry = &self.entries[key];
            let file = format!("kv_{i:05}.bin");
            std::fs::write(dir.join(&file), entry.kv.to_bytes())?;
            index.entries.push(IndexEntry {
                passage_id: key.clone(),
                fingerprint: entry.fingerprint.clone(),
                file,
            });
        }
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: StoreIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let mut store = Self::new();
        for e in index.entries {
            let kv = KvCache::from_bytes(&std::fs::read(dir.join(&e.file))?)?;
            store.entries.insert(
                e.passage_id,
                StoreEntry {
                    fingerprint: e.fingerprint,
                    kv,
                },
            );
        }
        Ok(store)
    }
}
