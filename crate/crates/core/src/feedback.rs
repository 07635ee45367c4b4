//! The two feedback streams: passage retrieval and fact-checking.
//!
//! Retrieval scores a query against every datastore passage and keeps those
//! above a threshold. Fact-checking extracts claims from a sentence with the
//! world's closed template grammar and verifies them against the world, which
//! stands in for an external verifier.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyworld::{FactTriple, World, OBJECT_SLOT, SUBJECT_SLOT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub passage: Passage,
    pub score: f64,
}

/// Lowercase alphanumeric word tokens.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Scores queries against an indexed passage list.
pub trait Scorer: Send + Sync {
    /// One score per indexed passage, in index order. Higher means more relevant.
    fn score(&self, query: &str) -> Vec<f64>;

    /// Closed interval every score falls in; thresholds must lie inside it.
    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    HashedTf,
    TfIdf,
}

impl ScorerKind {
    pub fn build(self, passages: &[Passage]) -> Box<dyn Scorer> {
        match self {
            ScorerKind::HashedTf => Box::new(HashedTfScorer::new(passages)),
            ScorerKind::TfIdf => Box::new(TfIdfScorer::new(passages)),
        }
    }
}

pub const HASH_BUCKETS: usize = 4096;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

type SparseVec = BTreeMap<usize, f64>;

fn normalize(mut v: SparseVec) -> SparseVec {
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.values_mut().for_each(|x| *x /= norm);
    }
    v
}

fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().filter_map(|(k, x)| large.get(k).map(|y| x * y)).sum()
}

fn hashed_tf(text: &str) -> SparseVec {
    let mut v = SparseVec::new();
    for w in words(text) {
        *v.entry((fnv1a(&w) % HASH_BUCKETS as u64) as usize).or_default() += 1.0;
    }
    normalize(v)
}

/// Cosine similarity of L2-normalized hashed term-frequency vectors.
pub struct HashedTfScorer {
    vectors: Vec<SparseVec>,
}

impl HashedTfScorer {
    pub fn new(passages: &[Passage]) -> Self {
        Self {
            vectors: passages.iter().map(|p| hashed_tf(&p.text)).collect(),
        }
    }
}

impl Scorer for HashedTfScorer {
    fn score(&self, query: &str) -> Vec<f64> {
        let q = hashed_tf(query);
        self.vectors.iter().map(|p| sparse_dot(&q, p).clamp(0.0, 1.0)).collect()
    }
}

/// Cosine similarity of TF-IDF vectors with `idf = ln(N / df)`. Query words
/// absent from the datastore carry no weight.
pub struct TfIdfScorer {
    terms: BTreeMap<String, (usize, f64)>,
    vectors: Vec<SparseVec>,
}

impl TfIdfScorer {
    pub fn new(passages: &[Passage]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for p in passages {
            let unique: HashSet<String> = words(&p.text).into_iter().collect();
            for w in unique {
                *df.entry(w).or_default() += 1;
            }
        }
        let n = passages.len() as f64;
        let terms: BTreeMap<String, (usize, f64)> = df
            .into_iter()
            .enumerate()
            .map(|(i, (w, d))| (w, (i, (n / d as f64).ln())))
            .collect();
        let mut s = Self { terms, vectors: Vec::new() };
        s.vectors = passages.iter().map(|p| s.vectorize(&p.text)).collect();
        s
    }

    fn vectorize(&self, text: &str) -> SparseVec {
        let mut v = SparseVec::new();
        for w in words(text) {
            if let Some(&(i, idf)) = self.terms.get(&w) {
                if idf > 0.0 {
                    *v.entry(i).or_default() += idf;
                }
            }
        }
        normalize(v)
    }
}

impl Scorer for TfIdfScorer {
    fn score(&self, query: &str) -> Vec<f64> {
        let q = self.vectorize(query);
        self.vectors.iter().map(|p| sparse_dot(&q, p).clamp(0.0, 1.0)).collect()
    }
}

/// Passages plus the scorer indexed over them.
pub struct Datastore {
    passages: Vec<Passage>,
    scorer: Box<dyn Scorer>,
}

impl std::fmt::Debug for Datastore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Datastore").field("passages", &self.passages.len()).finish()
    }
}

impl Datastore {
    pub fn new(passages: Vec<Passage>, kind: ScorerKind) -> Result<Self> {
        let scorer = kind.build(&passages);
        Self::with_scorer(passages, scorer)
    }

    pub fn with_scorer(passages: Vec<Passage>, scorer: Box<dyn Scorer>) -> Result<Self> {
        let mut ids = HashSet::new();
        for p in &passages {
            if p.text.trim().is_empty() {
                return Err(Error::format("datastore", format!("passage {} has empty text", p.id)));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(Error::format("datastore", format!("duplicate passage id {}", p.id)));
            }
        }
        Ok(Self { passages, scorer })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Seeded subset holding `round(fraction · len)` passages, in original order.
    pub fn sample_passages(passages: &[Passage], fraction: f64, seed: u64) -> Result<Vec<Passage>> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config("retrieval.fraction must lie in [0, 1]"));
        }
        let keep = (fraction * passages.len() as f64).round() as usize;
        let mut idx: Vec<usize> = (0..passages.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(keep);
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| passages[i].clone()).collect())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<Passage>> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Passage = serde_json::from_str(&line)
                .map_err(|e| Error::format(path.display().to_string(), format!("line {}: {e}", i + 1)))?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn write_jsonl(path: &Path, passages: &[Passage]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in passages {
            writeln!(f, "{}", serde_json::to_string(p)?)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Passages scoring strictly above `tau`, best first, ties broken by passage ID.
pub fn retrieve(store: &Datastore, query: &str, tau: f64, top_n: usize) -> Result<Vec<ScoredPassage>> {
    if top_n == 0 {
        return Err(Error::config("retrieval.top_n must be at least 1"));
    }
    let (lo, hi) = store.scorer.range();
    if !(lo..=hi).contains(&tau) {
        return Err(Error::config(format!("retrieval.tau {tau} outside scorer range [{lo}, {hi}]")));
    }
    if store.is_empty() {
        return Ok(Vec::new());
    }
    let scores = store.scorer.score(query);
    let mut hits: Vec<ScoredPassage> = store
        .passages
        .iter()
        .zip(scores)
        .filter(|(_, s)| *s > tau)
        .map(|(p, score)| ScoredPassage {
            passage: p.clone(),
            score,
        })
        .collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.passage.id.cmp(&b.passage.id)));
    hits.truncate(top_n);
    Ok(hits)
}

pub fn build_query(question: &str, sentence: &str) -> String {
    if sentence.is_empty() {
        question.to_string()
    } else {
        format!("{question} {sentence}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub text: String,
    pub triple: FactTriple,
    /// The sentence the claim was extracted from.
    pub sentence: String,
}

fn strip_terminal(w: &str) -> &str {
    w.trim_end_matches(['.', '!', '?', ',', ';', ':'])
}

fn match_clause(world: &World, clause: &[&str]) -> Option<Claim> {
    for r in &world.spec.relations {
        let pattern: Vec<&str> = r.template.split_whitespace().map(strip_terminal).collect();
        if pattern.len() != clause.len() {
            continue;
        }
        let (mut subject, mut object) = (None, None);
        let ok = pattern.iter().zip(clause).all(|(p, w)| match *p {
            SUBJECT_SLOT => {
                subject = Some(*w);
                true
            }
            OBJECT_SLOT => {
                object = Some(*w);
                true
            }
            lit => lit.eq_ignore_ascii_case(w),
        });
        let (Some(s), Some(o)) = (subject, object) else { continue };
        if ok && world.is_entity(s) && world.is_vocabulary_word(o) {
            let triple = FactTriple::new(s, &r.name, o);
            let text = world.render(&triple).ok()?;
            return Some(Claim {
                text,
                triple,
                sentence: String::new(),
            });
        }
    }
    None
}

/// Claims asserted by `sentence` under the world's template grammar. Clauses
/// joined by "and" are matched independently.
pub fn extract_claims(sentence: &str, world: &World) -> Vec<Claim> {
    let tokens: Vec<&str> = sentence
        .split_whitespace()
        .map(strip_terminal)
        .filter(|w| !w.is_empty())
        .collect();
    tokens
        .split(|w| *w == "and")
        .filter_map(|clause| match_clause(world, clause))
        .map(|mut c| {
            c.sentence = sentence.trim().to_string();
            c
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Supported,
    Unsupported,
    Unverifiable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: Claim,
    pub status: VerdictStatus,
    /// Corroborating passage for supported claims, the true fact for unsupported ones.
    pub evidence: Vec<Passage>,
}

pub fn verify(claim: &Claim, world: &World) -> Verdict {
    let t = &claim.triple;
    let (status, evidence) = match world.object(&t.subject, &t.relation) {
        None => (VerdictStatus::Unverifiable, Vec::new()),
        Some(o) => {
            let status = if o == t.object {
                VerdictStatus::Supported
            } else {
                VerdictStatus::Unsupported
            };
            (status, world.passage_for(&t.subject, &t.relation).into_iter().collect())
        }
    };
    Verdict {
        claim: claim.clone(),
        status,
        evidence,
    }
}

/// Extracts and verifies every claim of one sentence.
pub fn check_sentence(sentence: &str, world: &World) -> Vec<Verdict> {
    extract_claims(sentence, world).iter().map(|c| verify(c, world)).collect()
}

pub fn unsupported_count(verdicts: &[Verdict]) -> usize {
    verdicts.iter().filter(|v| v.status == VerdictStatus::Unsupported).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackForm {
    pub include_refuting_passages: bool,
    pub include_supporting_passages: bool,
    pub include_instruction: bool,
}

impl Default for FeedbackForm {
    fn default() -> Self {
        Self {
            include_refuting_passages: true,
            include_supporting_passages: true,
            include_instruction: false,
        }
    }
}

pub const INSTRUCTION_PREFIX: &str = "Please refrain from including the following imprecise statements:";

/// Feedback texts, one per memory unit: supporting evidence first, then
/// refuting evidence, then the optional instruction. Each claim's passages
/// share one text; passages already emitted are skipped.
pub fn render_feedback(verdicts: &[Verdict], form: FeedbackForm) -> Result<Vec<String>> {
    if verdicts.is_empty() {
        return Err(Error::contract("render_feedback needs at least one verdict"));
    }
    let mut seen = HashSet::new();
    let mut texts = Vec::new();
    let mut emit = |status: VerdictStatus, texts: &mut Vec<String>| {
        for v in verdicts.iter().filter(|v| v.status == status) {
            let fresh: Vec<&str> = v
                .evidence
                .iter()
                .filter(|p| seen.insert(p.id.clone()))
                .map(|p| p.text.as_str())
                .collect();
            if !fresh.is_empty() {
                texts.push(fresh.join("\n"));
            }
        }
    };
    if form.include_supporting_passages {
        emit(VerdictStatus::Supported, &mut texts);
    }
    if form.include_refuting_passages {
        emit(VerdictStatus::Unsupported, &mut texts);
    }
    if form.include_instruction {
        let claims: Vec<String> = verdicts
            .iter()
            .filter(|v| v.status == VerdictStatus::Unsupported)
            .enumerate()
            .map(|(i, v)| format!("({}) {}", i + 1, v.claim.text))
            .collect();
        if !claims.is_empty() {
            texts.push(format!("{INSTRUCTION_PREFIX} {}", claims.join(" ")));
        }
    }
    Ok(texts)
}
