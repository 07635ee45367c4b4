//! The generation loop.
//!
//! Decoding runs token by token. After each sampled token the loop checks the
//! retrieval and verification triggers; a retrieval pause pushes fresh
//! passages into the retrieval pool, a verification pause fact-checks the
//! completed sentences that have not been checked yet. A sentence with an
//! unsupported claim is cut, its corrective evidence goes into the fact-check
//! pool, and decoding resumes from the last accepted boundary. After `r_max`
//! regenerations of one boundary the attempt with the fewest unsupported
//! claims is kept.
//!
//! The context cache is never rebuilt when memory changes: only the last token
//! is re-fed so the next logits see the refreshed memory.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attention::AggregationConfig;
use crate::error::{Error, Result};
use crate::feedback::{
    build_query, check_sentence, render_feedback, retrieve, unsupported_count, Datastore, FeedbackForm, ScoredPassage,
    ScorerKind, Verdict, VerdictStatus,
};
use crate::memory::{encode_unit, FeedbackKind, MemoryUnit, PrecomputeStore, WorkingMemory};
use crate::model::{token_stats, LanguageModel, Sampler, SamplingPolicy, TokenId, Tokenizer, ABBREVIATIONS, BOS, EOS};
use crate::toyworld::World;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    /// Every `interval` decode steps.
    Fixed { interval: usize },
    /// When a just-completed sentence has mean token entropy above `threshold` nats.
    Entropy { threshold: f64 },
    /// When a just-completed sentence has a sampled token with probability below `threshold`.
    MinProb { threshold: f64 },
    Off,
}

impl Trigger {
    pub fn validate(&self, field: &str) -> Result<()> {
        match *self {
            Trigger::Fixed { interval: 0 } => {
                Err(Error::config(format!("{field}.interval must be at least 1")))
            }
            Trigger::Entropy { threshold } if !(threshold >= 0.0) => {
                Err(Error::config(format!("{field}.threshold must be non-negative")))
            }
            Trigger::MinProb { threshold } if !(threshold > 0.0 && threshold < 1.0) => {
                Err(Error::config(format!("{field}.threshold must lie in (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_off(&self) -> bool {
        matches!(self, Trigger::Off)
    }

    fn is_confidence(&self) -> bool {
        matches!(self, Trigger::Entropy { .. } | Trigger::MinProb { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerPolicy {
    pub retrieval: Trigger,
    pub verification: Trigger,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        Self {
            retrieval: Trigger::Fixed { interval: 1 },
            verification: Trigger::Fixed { interval: 8 },
        }
    }
}

/// Per-token statistics of the sampled token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStat {
    pub prob: f64,
    pub entropy: f64,
}

/// What a trigger sees after one decode step.
#[derive(Debug, Clone, Copy)]
pub struct PauseView<'a> {
    /// Decode steps taken so far, counting this one.
    pub step: usize,
    /// Token statistics of the sentence completed by this step, if any.
    pub completed: Option<&'a [TokenStat]>,
    /// Whether a sentence completed since the last pause of this kind.
    pub new_sentence: bool,
}

/// Trigger decision. Every pause needs a sentence completed since the last
/// pause of the same kind; otherwise the feedback round is skipped.
pub fn should_pause(view: &PauseView<'_>, trigger: Trigger) -> bool {
    if !view.new_sentence {
        return false;
    }
    match trigger {
        Trigger::Off => false,
        Trigger::Fixed { interval } => view.step % interval == 0,
        Trigger::Entropy { threshold } => match view.completed {
            Some(s) if !s.is_empty() => s.iter().map(|t| t.entropy).sum::<f64>() / s.len() as f64 > threshold,
            _ => false,
        },
        Trigger::MinProb { threshold } => match view.completed {
            Some(s) if !s.is_empty() => s.iter().map(|t| t.prob).fold(f64::INFINITY, f64::min) < threshold,
            _ => false,
        },
    }
}

/// Whether the decoded tail ends a sentence.
pub fn detect_sentence_end(tail: &str) -> bool {
    if tail.ends_with('\n') {
        return true;
    }
    let tail = tail.trim_end_matches(' ');
    if !tail.ends_with(['.', '!', '?']) {
        return false;
    }
    let last = tail.split_whitespace().last().unwrap_or("").to_lowercase();
    !ABBREVIATIONS.contains(&last.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub k_r: usize,
    pub k_v: usize,
    /// Maximum tokens per unit (`M`).
    pub unit_len: usize,
    /// Position of the first prompt token; `None` means `unit_len`.
    pub context_offset: Option<usize>,
    pub include_context_branch: bool,
    pub precompute: bool,
}

impl MemoryConfig {
    pub fn offset(&self) -> usize {
        self.context_offset.unwrap_or(self.unit_len)
    }
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            k_r: 4,
            k_v: 2,
            unit_len: 128,
            context_offset: None,
            include_context_branch: true,
            precompute: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub tau: f64,
    pub top_n: usize,
    pub scorer: ScorerKind,
    /// Fraction of the datastore kept when it is loaded.
    pub fraction: f64,
    /// Runs one retrieval with the question alone before decoding.
    pub at_start: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            tau: 0.25,
            top_n: 4,
            scorer: ScorerKind::HashedTf,
            fraction: 1.0,
            at_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub triggers: TriggerPolicy,
    pub memory: MemoryConfig,
    pub retrieval: RetrievalConfig,
    pub feedback: FeedbackForm,
    pub sampling: SamplingPolicy,
    pub seed: u64,
    pub max_steps: usize,
    pub r_max: usize,
    pub stop_at_eos: bool,
    /// Continue without a feedback round when it fails (logged as a warning).
    pub fail_open: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            triggers: TriggerPolicy::default(),
            memory: MemoryConfig::default(),
            retrieval: RetrievalConfig::default(),
            feedback: FeedbackForm::default(),
            sampling: SamplingPolicy::Greedy,
            seed: 0,
            max_steps: 1024,
            r_max: 2,
            stop_at_eos: true,
            fail_open: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        self.triggers.retrieval.validate("triggers.retrieval")?;
        self.triggers.verification.validate("triggers.verification")?;
        self.sampling.validate()?;
        if self.memory.unit_len == 0 {
            return Err(Error::config("memory.unit_len must be at least 1"));
        }
        if self.retrieval.top_n == 0 {
            return Err(Error::config("retrieval.top_n must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.retrieval.tau) {
            return Err(Error::config("retrieval.tau must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.retrieval.fraction) {
            return Err(Error::config("retrieval.fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Plain decoding: no retrieval, no verification, no memory.
    pub fn plain() -> Self {
        let mut c = Self::default();
        c.triggers = TriggerPolicy {
            retrieval: Trigger::Off,
            verification: Trigger::Off,
        };
        c.retrieval.at_start = false;
        c.memory.k_r = 0;
        c.memory.k_v = 0;
        c
    }
}

/// Source of retrieved passages.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, tau: f64, top_n: usize) -> Result<Vec<ScoredPassage>>;
}

impl Retriever for Datastore {
    fn retrieve(&self, query: &str, tau: f64, top_n: usize) -> Result<Vec<ScoredPassage>> {
        retrieve(self, query, tau, top_n)
    }
}

/// Extracts and verifies the claims of one sentence.
pub trait FactChecker: Send + Sync {
    fn check(&self, sentence: &str) -> Result<Vec<Verdict>>;
}

impl FactChecker for World {
    fn check(&self, sentence: &str) -> Result<Vec<Verdict>> {
        Ok(check_sentence(sentence, self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PauseReason {
    Retrieval,
    Verification,
    /// Verification of whatever is still unchecked when decoding stops.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Passed verification on the first attempt, or verification was off.
    Accepted,
    Corrected,
    AcceptedWithErrors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    MaxSteps,
    Capacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRef {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimStatus {
    pub claim: String,
    pub status: VerdictStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    Start {
        prompt: String,
        prompt_tokens: usize,
    },
    Pause {
        reason: PauseReason,
    },
    Retrieval {
        query: String,
        passages: Vec<PassageRef>,
        evicted: Vec<u64>,
    },
    Refresh {
        kind: FeedbackKind,
        unit: u64,
        source_id: Option<String>,
        text: String,
        tokens: usize,
        evicted: Option<u64>,
    },
    Verification {
        sentence: String,
        verdicts: Vec<ClaimStatus>,
    },
    Backtrack {
        /// Token offsets into the response.
        from: usize,
        to: usize,
        attempt: usize,
        sentence: String,
    },
    Accept {
        sentence: String,
        tokens: Vec<TokenId>,
        attempts: usize,
        residual_unsupported: usize,
        outcome: Outcome,
    },
    Warning {
        message: String,
    },
    Finish {
        reason: FinishReason,
        response: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Append-only record of one generation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    fn push(&mut self, step: usize, kind: EventKind) {
        self.events.push(Event { step, kind });
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') || line.starts_with("{\"header\"") {
                continue;
            }
            events.push(
                serde_json::from_str(line).map_err(|e| Error::format("event log", format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self { events })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut text = String::new();
        for line in file.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    /// Rebuilds the response from the accepted sentences.
    pub fn replay(&self, tokenizer: &Tokenizer) -> String {
        let tokens: Vec<TokenId> = self
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Accept { tokens, .. } => Some(tokens.clone()),
                _ => None,
            })
            .flatten()
            .collect();
        tokenizer.detokenize(&tokens)
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }

    /// Passages returned by all retrieval rounds.
    pub fn retrieved_passages(&self) -> usize {
        self.events
            .iter()
            .map(|e| match &e.kind {
                EventKind::Retrieval { passages, .. } => passages.len(),
                _ => 0,
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub response: String,
    /// Accepted response tokens.
    pub tokens: Vec<TokenId>,
    pub events: EventLog,
    /// Decode steps, including discarded tokens.
    pub steps: usize,
    pub finish: FinishReason,
}

#[derive(Debug, Clone)]
struct Sentence {
    start: usize,
    end: usize,
}

#[derive(Debug, Clone)]
struct Attempt {
    tokens: Vec<TokenId>,
    stats: Vec<TokenStat>,
    unsupported: usize,
}

/// Mutable state of one generation.
struct GenerationState {
    history: Vec<TokenId>,
    stats: Vec<TokenStat>,
    prompt_len: usize,
    /// End of the last accepted sentence.
    accepted: usize,
    /// Completed sentences awaiting verification, oldest first.
    pending: Vec<Sentence>,
    /// Start of the sentence in progress.
    current: usize,
    step: usize,
    new_sentence: [bool; 2],
    attempts: Vec<Attempt>,
    memory: WorkingMemory,
    memory_dirty: bool,
    logits: Option<Vec<f64>>,
}

enum Verified {
    /// Every pending sentence was accepted.
    Clean,
    /// Tokens were cut; decoding continues from the accepted boundary.
    Rewound,
}

/// Callback receiving `(step, logits)` before each sampling decision.
pub type StepObserver<'o> = dyn FnMut(usize, &[f64]) + 'o;

/// Callback receiving every event as it is logged.
pub type EventSink = dyn Fn(&Event) + Sync;

pub struct Generator<'a> {
    pub model: &'a dyn LanguageModel,
    pub tokenizer: &'a Tokenizer,
    pub config: &'a GenerationConfig,
    pub retriever: Option<&'a dyn Retriever>,
    pub checker: Option<&'a dyn FactChecker>,
    pub store: Option<&'a Mutex<PrecomputeStore>>,
    pub sink: Option<&'a EventSink>,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a dyn LanguageModel, tokenizer: &'a Tokenizer, config: &'a GenerationConfig) -> Self {
        Self {
            model,
            tokenizer,
            config,
            retriever: None,
            checker: None,
            store: None,
            sink: None,
        }
    }

    pub fn with_sink(mut self, sink: &'a EventSink) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn with_retriever(mut self, r: &'a dyn Retriever) -> Self {
        self.retriever = Some(r);
        self
    }

    pub fn with_checker(mut self, c: &'a dyn FactChecker) -> Self {
        self.checker = Some(c);
        self
    }

    pub fn with_store(mut self, s: &'a Mutex<PrecomputeStore>) -> Self {
        self.store = Some(s);
        self
    }

    pub fn generate(&self, prompt: &str) -> Result<GenerationResult> {
        self.generate_observed(prompt, &mut |_, _| {})
    }

    pub fn generate_observed(&self, prompt: &str, observer: &mut StepObserver<'_>) -> Result<GenerationResult> {
        Run::new(self, prompt)?.run(observer)
    }
}

struct Run<'g, 'a> {
    g: &'g Generator<'a>,
    cfg: &'a GenerationConfig,
    question: String,
    state: GenerationState,
    kv: crate::model::KvCache,
    sampler: Sampler,
    log: EventLog,
}

fn kind_index(kind: FeedbackKind) -> usize {
    match kind {
        FeedbackKind::Retrieval => 0,
        FeedbackKind::Factcheck => 1,
    }
}

impl<'g, 'a> Run<'g, 'a> {
    fn new(g: &'g Generator<'a>, prompt: &str) -> Result<Self> {
        let cfg = g.config;
        cfg.validate()?;
        let mut history = vec![BOS];
        history.extend(g.tokenizer.tokenize(prompt));
        let prompt_len = history.len();
        Ok(Self {
            g,
            cfg,
            question: prompt.trim().to_string(),
            state: GenerationState {
                history,
                stats: Vec::new(),
                prompt_len,
                accepted: prompt_len,
                pending: Vec::new(),
                current: prompt_len,
                step: 0,
                new_sentence: [false; 2],
                attempts: Vec::new(),
                memory: WorkingMemory::new(cfg.memory.k_r, cfg.memory.k_v),
                memory_dirty: false,
                logits: None,
            },
            kv: g.model.new_context(cfg.memory.offset()),
            sampler: Sampler::new(cfg.sampling, cfg.seed)?,
            log: EventLog::default(),
        })
    }

    fn emit(&mut self, step: usize, kind: EventKind) {
        self.log.push(step, kind);
        if let Some(sink) = self.g.sink {
            sink(self.log.events.last().unwrap());
        }
    }

    fn verification_on(&self) -> bool {
        !self.cfg.triggers.verification.is_off() && self.g.checker.is_some()
    }

    fn text(&self, from: usize, to: usize) -> String {
        self.g.tokenizer.detokenize(&self.state.history[from..to]).trim().to_string()
    }

    fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.emit(self.state.step, EventKind::Warning { message });
    }

    fn run(mut self, observer: &mut StepObserver<'_>) -> Result<GenerationResult> {
        self.emit(
            0,
            EventKind::Start {
                prompt: self.question.clone(),
                prompt_tokens: self.state.prompt_len,
            },
        );
        if self.cfg.retrieval.at_start && self.g.retriever.is_some() {
            self.retrieval_round(true)?;
        }
        let finish = loop {
            if self.state.step >= self.cfg.max_steps {
                break FinishReason::MaxSteps;
            }
            let logits = match self.ensure_logits() {
                Ok(l) => l,
                Err(Error::Capacity { position, max_positions }) => {
                    self.warn(format!("position {position} exceeds max_positions {max_positions}; stopping"));
                    break FinishReason::Capacity;
                }
                Err(e) => return Err(e),
            };
            observer(self.state.step, &logits);
            let token = self.sampler.sample(&logits)?;
            let (prob, entropy) = token_stats(&logits, token);
            self.state.step += 1;
            if token == EOS && self.cfg.stop_at_eos {
                self.close_fragment();
                match self.finish_round(true)? {
                    Verified::Clean => break FinishReason::Eos,
                    Verified::Rewound => continue,
                }
            }
            self.push_token(token, TokenStat { prob, entropy });
            let completed = self.detect_boundary();
            self.after_step(completed)?;
        };
        if finish != FinishReason::Eos {
            self.close_fragment();
            self.finish_round(false)?;
        }
        let tokens = self.state.history[self.state.prompt_len..].to_vec();
        let response = self.g.tokenizer.detokenize(&tokens);
        self.emit(
            self.state.step,
            EventKind::Finish {
                reason: finish,
                response: response.clone(),
            },
        );
        Ok(GenerationResult {
            response,
            tokens,
            events: self.log,
            steps: self.state.step,
            finish,
        })
    }

    fn push_token(&mut self, token: TokenId, stat: TokenStat) {
        self.state.history.push(token);
        self.state.stats.push(stat);
        self.state.logits = None;
    }

    fn truncate(&mut self, len: usize) {
        let s = &mut self.state;
        s.history.truncate(len);
        s.stats.truncate(len - s.prompt_len);
        s.logits = None;
        if self.kv.len() > len {
            self.kv.truncate(len);
        }
    }

    fn ensure_logits(&mut self) -> Result<Vec<f64>> {
        let s = &mut self.state;
        if let Some(l) = &s.logits {
            if !s.memory_dirty {
                return Ok(l.clone());
            }
        }
        let target = s.history.len();
        let mut keep = self.kv.len().min(target);
        if s.memory_dirty || keep == target {
            keep = keep.min(target - 1);
        }
        self.kv.truncate(keep);
        let units = s.memory.units();
        let agg = AggregationConfig {
            include_context_branch: self.cfg.memory.include_context_branch,
        };
        let logits = self
            .g
            .model
            .step(&units, &mut self.kv, &s.history, &s.history[keep..], agg)?;
        s.memory_dirty = false;
        s.logits = Some(logits.clone());
        Ok(logits)
    }

    /// Registers a sentence boundary if the last token closed one.
    fn detect_boundary(&mut self) -> bool {
        let tail = self.g.tokenizer.detokenize(&self.state.history[self.state.current..]);
        if !detect_sentence_end(&tail) {
            return false;
        }
        let end = self.state.history.len();
        self.state.pending.push(Sentence {
            start: self.state.current,
            end,
        });
        self.state.current = end;
        self.state.new_sentence = [true; 2];
        true
    }

    fn close_fragment(&mut self) {
        let s = &mut self.state;
        if s.current < s.history.len() {
            s.pending.push(Sentence {
                start: s.current,
                end: s.history.len(),
            });
            s.current = s.history.len();
            s.new_sentence = [true; 2];
        }
    }

    fn view<'s>(&'s self, completed: bool, kind: FeedbackKind) -> PauseView<'s> {
        let s = &self.state;
        PauseView {
            step: s.step,
            completed: completed.then(|| {
                let last = s.pending.last().expect("boundary just recorded");
                &s.stats[last.start - s.prompt_len..last.end - s.prompt_len]
            }),
            new_sentence: s.new_sentence[kind_index(kind)],
        }
    }

    fn after_step(&mut self, completed: bool) -> Result<()> {
        let triggers = self.cfg.triggers;
        if self.g.retriever.is_some() && should_pause(&self.view(completed, FeedbackKind::Retrieval), triggers.retrieval) {
            self.retrieval_round(false)?;
        }
        if !self.verification_on() {
            self.accept_all_pending();
            return Ok(());
        }
        if should_pause(&self.view(completed, FeedbackKind::Factcheck), triggers.verification) {
            self.emit(
                self.state.step,
                EventKind::Pause {
                    reason: PauseReason::Verification,
                },
            );
            self.state.new_sentence[1] = false;
            self.verify_pending(true)?;
        } else if completed && triggers.verification.is_confidence() {
            // Confident sentences pass without a check.
            self.accept_all_pending();
        }
        Ok(())
    }

    /// Final round when decoding stops. Returns `Rewound` if an EOS-time
    /// backtrack means decoding must go on.
    fn finish_round(&mut self, can_regenerate: bool) -> Result<Verified> {
        if !self.verification_on() || self.state.pending.is_empty() {
            self.accept_all_pending();
            return Ok(Verified::Clean);
        }
        if self.cfg.triggers.verification.is_confidence() {
            let last = self.state.pending.last().unwrap();
            let stats = &self.state.stats[last.start - self.state.prompt_len..last.end - self.state.prompt_len];
            let view = PauseView {
                step: self.state.step,
                completed: Some(stats),
                new_sentence: true,
            };
            if !should_pause(&view, self.cfg.triggers.verification) {
                self.accept_all_pending();
                return Ok(Verified::Clean);
            }
        }
        self.emit(self.state.step, EventKind::Pause { reason: PauseReason::Final });
        self.state.new_sentence[1] = false;
        let can = can_regenerate && self.state.step < self.cfg.max_steps;
        self.verify_pending(can)
    }

    fn accept_all_pending(&mut self) {
        let pending = std::mem::take(&mut self.state.pending);
        for s in pending {
            self.accept(&s, Outcome::Accepted, 0);
        }
    }

    fn accept(&mut self, s: &Sentence, outcome: Outcome, residual: usize) {
        let attempts = self.state.attempts.len() + 1;
        self.accept_after(s, outcome, residual, attempts);
    }

    fn accept_after(&mut self, s: &Sentence, outcome: Outcome, residual: usize, attempts: usize) {
        self.emit(
            self.state.step,
            EventKind::Accept {
                sentence: self.text(s.start, s.end),
                tokens: self.state.history[s.start..s.end].to_vec(),
                attempts,
                residual_unsupported: residual,
                outcome,
            },
        );
        self.state.accepted = s.end;
        self.state.attempts.clear();
    }

    fn check(&mut self, sentence: &str) -> Result<Option<Vec<Verdict>>> {
        let checker = self.g.checker.expect("verification requires a checker");
        match checker.check(sentence) {
            Ok(v) => Ok(Some(v)),
            Err(e) if self.cfg.fail_open => {
                self.warn(format!("fact-check failed, sentence accepted unchecked: {e}"));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn verify_pending(&mut self, can_regenerate: bool) -> Result<Verified> {
        while !self.state.pending.is_empty() {
            let s = self.state.pending.remove(0);
            let sentence = self.text(s.start, s.end);
            let Some(verdicts) = self.check(&sentence)? else {
                self.accept(&s, Outcome::Accepted, 0);
                continue;
            };
            self.emit(
                self.state.step,
                EventKind::Verification {
                    sentence: sentence.clone(),
                    verdicts: verdicts
                        .iter()
                        .map(|v| ClaimStatus {
                            claim: v.claim.text.clone(),
                            status: v.status,
                        })
                        .collect(),
                },
            );
            let bad = unsupported_count(&verdicts);
            if bad == 0 {
                let outcome = if self.state.attempts.is_empty() {
                    Outcome::Accepted
                } else {
                    Outcome::Corrected
                };
                self.accept(&s, outcome, 0);
                continue;
            }
            if self.backtrack_and_regenerate(&s, &verdicts, can_regenerate)? {
                return Ok(Verified::Rewound);
            }
        }
        Ok(Verified::Clean)
    }

    /// Handles one sentence with unsupported claims. Returns whether tokens
    /// after the accepted boundary were cut.
    fn backtrack_and_regenerate(&mut self, s: &Sentence, verdicts: &[Verdict], can_regenerate: bool) -> Result<bool> {
        let bad = unsupported_count(verdicts);
        if bad == 0 {
            return Err(Error::contract("backtrack requested for a sentence without unsupported claims"));
        }
        let p = self.state.prompt_len;
        self.state.attempts.push(Attempt {
            tokens: self.state.history[s.start..s.end].to_vec(),
            stats: self.state.stats[s.start - p..s.end - p].to_vec(),
            unsupported: bad,
        });
        let attempt = self.state.attempts.len();
        if attempt > self.cfg.r_max || !can_regenerate {
            return Ok(self.accept_best(s));
        }
        match render_feedback(verdicts, self.cfg.feedback) {
            Ok(texts) => {
                for text in texts {
                    self.push_unit(FeedbackKind::Factcheck, &text, None)?;
                }
            }
            Err(e) if self.cfg.fail_open => self.warn(format!("feedback rendering failed: {e}")),
            Err(e) => return Err(e),
        }
        let from = self.state.history.len() - p;
        self.emit(
            self.state.step,
            EventKind::Backtrack {
                from,
                to: s.start - p,
                attempt,
                sentence: self.text(s.start, s.end),
            },
        );
        self.rewind(s.start);
        self.sampler.reseed(self.cfg.seed + attempt as u64);
        Ok(true)
    }

    fn rewind(&mut self, to: usize) {
        self.truncate(to);
        let s = &mut self.state;
        s.pending.clear();
        s.current = to;
        s.new_sentence = [false; 2];
    }

    /// Keeps the attempt with the fewest unsupported claims, earliest on ties.
    fn accept_best(&mut self, s: &Sentence) -> bool {
        let attempts = std::mem::take(&mut self.state.attempts);
        let (best_i, best) = attempts
            .iter()
            .enumerate()
            .min_by_key(|(i, a)| (a.unsupported, *i))
            .expect("at least one attempt");
        let residual = best.unsupported;
        let cut = best_i + 1 != attempts.len();
        if cut {
            self.rewind(s.start);
            for (t, st) in best.tokens.iter().zip(&best.stats) {
                self.push_token(*t, *st);
            }
            self.state.current = self.state.history.len();
        }
        let end = s.start + best.tokens.len();
        self.accept_after(&Sentence { start: s.start, end }, Outcome::AcceptedWithErrors, residual, attempts.len());
        cut
    }

    fn push_unit(&mut self, kind: FeedbackKind, text: &str, source_id: Option<&str>) -> Result<Option<u64>> {
        let m = self.cfg.memory.unit_len;
        let id = self.state.memory.allocate_id();
        let step = self.state.step;
        let unit = match (source_id, self.g.store) {
            (Some(pid), Some(store)) if self.cfg.memory.precompute => {
                let mut tokens = self.g.tokenizer.tokenize(text);
                if tokens.is_empty() {
                    return Err(Error::EmptyFeedback);
                }
                tokens.truncate(m);
                let key = format!("{pid}#{m}");
                let (kv, _) = store
                    .lock()
                    .map_err(|_| Error::contract("precompute store poisoned"))?
                    .lookup_or_encode(self.g.model, &key, &tokens)?;
                MemoryUnit {
                    id,
                    kind,
                    source_text: text.to_string(),
                    source_id: Some(pid.to_string()),
                    tokens,
                    kv,
                    inserted_at_step: step,
                }
            }
            _ => {
                let mut u = encode_unit(self.g.model, self.g.tokenizer, text, kind, step, m, id)?;
                u.source_id = source_id.map(str::to_string);
                u
            }
        };
        let tokens = unit.token_count();
        let evicted = self.state.memory.push(unit)?.map(|u| u.id);
        let inserted = evicted != Some(id);
        self.emit(
            step,
            EventKind::Refresh {
                kind,
                unit: id,
                source_id: source_id.map(str::to_string),
                text: text.to_string(),
                tokens,
                evicted,
            },
        );
        if inserted {
            self.state.memory_dirty = true;
        }
        Ok(evicted)
    }

    /// The most recent completed sentence, accepted or pending.
    fn last_sentence(&self) -> String {
        let s = &self.state;
        match s.pending.last() {
            Some(p) => self.text(p.start, p.end),
            None => self
                .log
                .events
                .iter()
                .rev()
                .find_map(|e| match &e.kind {
                    EventKind::Accept { sentence, .. } => Some(sentence.clone()),
                    _ => None,
                })
                .unwrap_or_default(),
        }
    }

    fn retrieval_round(&mut self, initial: bool) -> Result<()> {
        let retriever = self.g.retriever.expect("retrieval requires a retriever");
        self.emit(
            self.state.step,
            EventKind::Pause {
                reason: PauseReason::Retrieval,
            },
        );
        self.state.new_sentence[0] = false;
        let sentence = if initial { String::new() } else { self.last_sentence() };
        let query = build_query(&self.question, &sentence);
        let r = self.cfg.retrieval;
        let hits = match retriever.retrieve(&query, r.tau, r.top_n) {
            Ok(h) => h,
            Err(e) if self.cfg.fail_open && !matches!(e, Error::Config(_)) => {
                self.warn(format!("retrieval failed: {e}"));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let held: HashSet<String> = self
            .state
            .memory
            .retrieval
            .units()
            .filter_map(|u| u.source_id.clone())
            .collect();
        let fresh: Vec<&ScoredPassage> = hits.iter().filter(|h| !held.contains(&h.passage.id)).collect();
        let mut evicted = Vec::new();
        // Lowest score first so the best passage is the last to be evicted.
        for h in fresh.iter().rev() {
            if let Some(e) = self.push_unit(FeedbackKind::Retrieval, &h.passage.text, Some(&h.passage.id))? {
                evicted.push(e);
            }
        }
        self.emit(
            self.state.step,
            EventKind::Retrieval {
                query,
                passages: hits
                    .iter()
                    .map(|h| PassageRef {
                        id: h.passage.id.clone(),
                        score: h.score,
                    })
                    .collect(),
                evicted,
            },
        );
        Ok(())
    }
}

/// Timeline of memory contents reconstructed from refresh events.
pub fn memory_timeline(log: &EventLog) -> Vec<String> {
    let mut lines = Vec::new();
    let mut live: Vec<(u64, FeedbackKind, String)> = Vec::new();
    for e in &log.events {
        match &e.kind {
            EventKind::Refresh {
                kind,
                unit,
                text,
                evicted,
                ..
            } => {
                live.push((*unit, *kind, text.replace('\n', " / ")));
                if let Some(ev) = evicted {
                    live.retain(|(id, _, _)| id != ev);
                }
                let mut line = format!("step {:>4}  +{:?} #{unit}", e.step, kind);
                if let Some(ev) = evicted {
                    line.push_str(&format!("  evicted #{ev}"));
                }
                lines.push(line);
                for (id, k, t) in &live {
                    lines.push(format!("            {:<9} #{id:<3} {t}", format!("{k:?}")));
                }
            }
            EventKind::Backtrack {
                from, to, attempt, sentence, ..
            } => lines.push(format!(
                "step {:>4}  backtrack {from} -> {to} (attempt {attempt}): {sentence}",
                e.step
            )),
            EventKind::Accept { sentence, outcome, .. } => {
                lines.push(format!("step {:>4}  accept [{outcome:?}] {sentence}", e.step))
            }
            EventKind::Warning { message } => lines.push(format!("step {:>4}  warning: {message}", e.step)),
            _ => {}
        }
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(probs: &[f64], entropy: f64) -> Vec<TokenStat> {
        probs.iter().map(|&prob| TokenStat { prob, entropy }).collect()
    }

    #[test]
    fn fixed_interval_uses_the_modulus() {
        let t = Trigger::Fixed { interval: 8 };
        let s = stats(&[0.5; 3], 0.1);
        assert!(!should_pause(&PauseView { step: 5, completed: Some(&s), new_sentence: true }, t));
        assert!(should_pause(&PauseView { step: 8, completed: None, new_sentence: true }, t));
        assert!(!should_pause(&PauseView { step: 8, completed: None, new_sentence: false }, t));
    }

    #[test]
    fn confidence_triggers() {
        let uniform = stats(&[0.25; 5], 4f64.ln());
        let view = PauseView { step: 3, completed: Some(&uniform), new_sentence: true };
        assert!(should_pause(&view, Trigger::Entropy { threshold: 1.0 }));
        assert!(!should_pause(&view, Trigger::Entropy { threshold: 1.5 }));
        let s = stats(&[0.9, 0.4, 0.8], 0.0);
        let view = PauseView { step: 3, completed: Some(&s), new_sentence: true };
        assert!(should_pause(&view, Trigger::MinProb { threshold: 0.5 }));
        assert!(!should_pause(&view, Trigger::MinProb { threshold: 0.3 }));
    }

    #[test]
    fn sentence_ends() {
        assert!(detect_sentence_end("Verona was founded in 1203."));
        assert!(!detect_sentence_end("for example e.g."));
        assert!(!detect_sentence_end("Verona was founded in 1203,"));
        assert!(detect_sentence_end("done!"));
        assert!(detect_sentence_end("line\n"));
    }

    #[test]
    fn trigger_validation() {
        assert!(Trigger::Fixed { interval: 0 }.validate("t").is_err());
        assert!(Trigger::MinProb { threshold: 1.0 }.validate("t").is_err());
        assert!(Trigger::Entropy { threshold: -0.1 }.validate("t").is_err());
        assert!(Trigger::Entropy { threshold: 0.0 }.validate("t").is_ok());
    }

    #[test]
    fn events_round_trip_as_jsonl() {
        let mut log = EventLog::default();
        log.push(3, EventKind::Pause { reason: PauseReason::Retrieval });
        log.push(
            4,
            EventKind::Accept {
                sentence: "A b.".into(),
                tokens: vec![5, 6, 3],
                attempts: 1,
                residual_unsupported: 0,
                outcome: Outcome::Accepted,
            },
        );
        let text = log.to_jsonl().unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"step\":3,\"type\":\"pause\",\"payload\""));
        assert_eq!(EventLog::from_jsonl(&text).unwrap(), log);
    }
}
