//! Claim-level factuality scoring, system comparisons and ablation sweeps.
//!
//! A response is split into sentences, claims are extracted and verified
//! against the world, and identical triples are counted once. Precision is
//! `S / N`; recall is `min(1, S / C)` where the cap `C` is the median claim
//! count of the plain system's responses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::feedback::{extract_claims, verify, Datastore, Passage, ScorerKind, VerdictStatus};
use crate::memory::PrecomputeStore;
use crate::model::{LanguageModel, Tokenizer, ABBREVIATIONS};
use crate::orchestrator::{EventKind, GenerationConfig, Generator, Trigger};
use crate::par::{self, Execution};
use crate::toyworld::{FactTriple, PromptCase, World};

/// Reference caps (median extracted claims) of four long-form benchmarks.
pub const REFERENCE_CAPS: [(&str, usize); 4] = [("LongFact", 55), ("FAVA", 49), ("AlpacaFact", 31), ("Biography", 43)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactualityScore {
    pub supported: usize,
    pub extracted: usize,
    pub cap: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl FactualityScore {
    pub fn from_counts(supported: usize, extracted: usize, cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::config("recall cap must be at least 1"));
        }
        if supported > extracted {
            return Err(Error::contract("supported claims exceed extracted claims"));
        }
        let (precision, recall) = if extracted == 0 {
            (0.0, 0.0)
        } else {
            (
                supported as f64 / extracted as f64,
                (supported as f64 / cap as f64).min(1.0),
            )
        };
        let f1 = if precision == 0.0 || recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            supported,
            extracted,
            cap,
            precision,
            recall,
            f1,
        })
    }
}

/// Splits text at sentence terminators, keeping known abbreviations intact.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut cur: Vec<&str> = Vec::new();
        for w in line.split_whitespace() {
            cur.push(w);
            if w.ends_with(['.', '!', '?']) && !ABBREVIATIONS.contains(&w.to_lowercase().as_str()) {
                out.push(cur.join(" "));
                cur.clear();
            }
        }
        if !cur.is_empty() {
            out.push(cur.join(" "));
        }
    }
    out
}

/// Distinct claim triples of a response with their verification status.
pub fn response_claims(response: &str, world: &World) -> BTreeMap<FactTriple, VerdictStatus> {
    let mut out = BTreeMap::new();
    for s in split_sentences(response) {
        for c in extract_claims(&s, world) {
            let status = verify(&c, world).status;
            out.entry(c.triple).or_insert(status);
        }
    }
    out
}

/// `(S, N)` for a response.
pub fn claim_counts(response: &str, world: &World) -> (usize, usize) {
    let claims = response_claims(response, world);
    let s = claims.values().filter(|s| **s == VerdictStatus::Supported).count();
    (s, claims.len())
}

pub fn score_response(response: &str, world: &World, cap: usize) -> Result<FactualityScore> {
    let (s, n) = claim_counts(response, world);
    FactualityScore::from_counts(s, n, cap)
}

/// Upper median, at least 1.
pub fn median_cap(counts: &[usize]) -> usize {
    if counts.is_empty() {
        return 1;
    }
    let mut v = counts.to_vec();
    v.sort_unstable();
    v[v.len() / 2].max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Plain,
    RagK1,
    EweFull,
    EweNoFactcheck,
    EweNoRetrieval,
}

impl System {
    pub const ALL: [System; 5] = [
        System::Plain,
        System::RagK1,
        System::EweFull,
        System::EweNoFactcheck,
        System::EweNoRetrieval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Plain => "plain",
            System::RagK1 => "rag_k1",
            System::EweFull => "ewe_full",
            System::EweNoFactcheck => "ewe_no_factcheck",
            System::EweNoRetrieval => "ewe_no_retrieval",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::config(format!("unknown system {name}")))
    }

    /// The system's configuration derived from the full EWE configuration.
    pub fn config(self, base: &GenerationConfig) -> GenerationConfig {
        let mut c = base.clone();
        match self {
            System::EweFull => {}
            System::EweNoFactcheck => c.triggers.verification = Trigger::Off,
            System::EweNoRetrieval => {
                c.triggers.retrieval = Trigger::Off;
                c.retrieval.at_start = false;
            }
            System::Plain => {
                c.triggers.retrieval = Trigger::Off;
                c.triggers.verification = Trigger::Off;
                c.retrieval.at_start = false;
            }
            System::RagK1 => {
                c.triggers.retrieval = Trigger::Off;
                c.triggers.verification = Trigger::Off;
                c.retrieval.at_start = true;
                c.memory.k_r = 1;
                c.memory.k_v = 0;
                c.memory.include_context_branch = false;
            }
        }
        c
    }

    /// Config fields this system changes relative to `ewe_full`.
    pub fn intended_diff(self) -> Vec<&'static str> {
        match self {
            System::EweFull => vec![],
            System::EweNoFactcheck => vec!["triggers.verification"],
            System::EweNoRetrieval => vec!["retrieval.at_start", "triggers.retrieval"],
            System::Plain => vec!["retrieval.at_start", "triggers.retrieval", "triggers.verification"],
            System::RagK1 => vec![
                "memory.include_context_branch",
                "memory.k_r",
                "memory.k_v",
                "retrieval.at_start",
                "triggers.retrieval",
                "triggers.verification",
            ],
        }
    }
}

/// Flattens a JSON value into dotted keys. Objects carrying a `kind` tag
/// (tagged enums) stay whole so a variant change counts as one field.
pub fn flatten_fields(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.contains_key("kind") => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

/// Fields whose values differ between two serializable configs, sorted.
pub fn config_diff<T: Serialize>(a: &T, b: &T) -> Result<Vec<String>> {
    let fa = flatten_fields(&serde_json::to_value(a)?);
    let fb = flatten_fields(&serde_json::to_value(b)?);
    let keys: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    Ok(keys.into_iter().filter(|k| fa.get(*k) != fb.get(*k)).cloned().collect())
}

/// Everything a run needs besides its configuration.
pub struct BenchContext<'a> {
    pub model: &'a dyn LanguageModel,
    pub tokenizer: &'a Tokenizer,
    pub world: &'a World,
    pub passages: &'a [Passage],
    pub store: Option<&'a Mutex<PrecomputeStore>>,
    datastores: Mutex<HashMap<(u64, u64, ScorerKind), std::sync::Arc<Datastore>>>,
}

impl<'a> BenchContext<'a> {
    pub fn new(model: &'a dyn LanguageModel, tokenizer: &'a Tokenizer, world: &'a World, passages: &'a [Passage]) -> Self {
        Self {
            model,
            tokenizer,
            world,
            passages,
            store: None,
            datastores: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_store(mut self, store: &'a Mutex<PrecomputeStore>) -> Self {
        self.store = Some(store);
        self
    }

    /// The datastore for a retrieval configuration, subsampled with `seed`.
    pub fn datastore(&self, config: &GenerationConfig, seed: u64) -> Result<std::sync::Arc<Datastore>> {
        let r = config.retrieval;
        let seed = if r.fraction >= 1.0 { 0 } else { seed };
        let key = (r.fraction.to_bits(), seed, r.scorer);
        let mut cache = self.datastores.lock().map_err(|_| Error::contract("datastore cache poisoned"))?;
        if let Some(ds) = cache.get(&key) {
            return Ok(ds.clone());
        }
        let passages = Datastore::sample_passages(self.passages, r.fraction, seed)?;
        let ds = std::sync::Arc::new(Datastore::new(passages, r.scorer)?);
        cache.insert(key, ds.clone());
        Ok(ds)
    }

    /// One generation with `config`, seeded by `seed`.
    pub fn run(&self, config: &GenerationConfig, prompt: &PromptCase, seed: u64) -> Result<RunRecord> {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let ds = self.datastore(&cfg, seed)?;
        let mut g = Generator::new(self.model, self.tokenizer, &cfg)
            .with_retriever(&*ds)
            .with_checker(self.world);
        if let Some(s) = self.store {
            g = g.with_store(s);
        }
        let t0 = Instant::now();
        let out = g.generate(&prompt.prompt)?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let (supported, extracted) = claim_counts(&out.response, self.world);
        let log = &out.events;
        Ok(RunRecord {
            entity: prompt.entity.clone(),
            seed,
            response: out.response.clone(),
            supported,
            extracted,
            steps: out.steps,
            wall_ms,
            retrieved_passages: log.retrieved_passages(),
            backtracks: log.count(|e| matches!(e, EventKind::Backtrack { .. })),
            events: out.events,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub entity: String,
    pub seed: u64,
    pub response: String,
    pub supported: usize,
    pub extracted: usize,
    pub steps: usize,
    pub wall_ms: f64,
    pub retrieved_passages: usize,
    pub backtracks: usize,
    #[serde(skip)]
    pub events: crate::orchestrator::EventLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub system: System,
    pub prompt: usize,
    #[serde(flatten)]
    pub run: RunRecord,
    pub score: FactualityScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: System,
    pub runs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_claims: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cap: usize,
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<SystemSummary>,
}

impl BenchReport {
    pub fn summary(&self, system: System) -> Option<&SystemSummary> {
        self.summaries.iter().find(|s| s.system == system)
    }

    /// Header line with the config, then one JSON row per run.
    pub fn to_jsonl(&self, config: &Value) -> Result<String> {
        let header = serde_json::json!({
            "header": {
                "config": config,
                "code_version": env!("CARGO_PKG_VERSION"),
                "cap": self.cap,
                "notes": "identical claim triples within one response are counted once",
                "summaries": self.summaries,
            }
        });
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn summarize(system: System, rows: &[&BenchRow]) -> SystemSummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&BenchRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    SystemSummary {
        system,
        runs: rows.len(),
        precision: mean(&|r| r.score.precision),
        recall: mean(&|r| r.score.recall),
        f1: mean(&|r| r.score.f1),
        mean_claims: mean(&|r| r.score.extracted as f64),
        mean_steps: mean(&|r| r.run.steps as f64),
    }
}

/// Runs every system on every prompt and seed. The cap is the median claim
/// count of the plain system, which is run even when not requested.
pub fn run_benchmark(
    ctx: &BenchContext<'_>,
    base: &GenerationConfig,
    systems: &[System],
    prompts: &[PromptCase],
    seeds: &[u64],
    exec: Execution,
) -> Result<BenchReport> {
    let mut all: Vec<System> = systems.to_vec();
    if !all.contains(&System::Plain) {
        all.push(System::Plain);
    }
    let mut jobs = Vec::new();
    for &sys in &all {
        for (pi, p) in prompts.iter().enumerate() {
            for &seed in seeds {
                jobs.push((sys, pi, p, seed));
            }
        }
    }
    let results = par::map(exec, &jobs, |&(sys, _, p, seed)| ctx.run(&sys.config(base), p, seed));
    let mut runs = Vec::with_capacity(jobs.len());
    for ((sys, pi, _, _), r) in jobs.iter().zip(results) {
        runs.push((*sys, *pi, r?));
    }
    let plain_counts: Vec<usize> = runs
        .iter()
        .filter(|(s, _, _)| *s == System::Plain)
        .map(|(_, _, r)| r.extracted)
        .collect();
    let cap = median_cap(&plain_counts);
    let mut rows = Vec::new();
    for (system, prompt, run) in runs {
        if !systems.contains(&system) {
            continue;
        }
        let score = FactualityScore::from_counts(run.supported, run.extracted, cap)?;
        rows.push(BenchRow {
            system,
            prompt,
            run,
            score,
        });
    }
    let summaries = systems
        .iter()
        .map(|&s| summarize(s, &rows.iter().filter(|r| r.system == s).collect::<Vec<_>>()))
        .collect();
    Ok(BenchReport { cap, rows, summaries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Retrieval units `k_r`.
    UnitCount,
    /// Tokens per unit; the context offset stays at the base value.
    UnitLength,
    Tau,
    TR,
    TV,
    /// Verification on mean sentence entropy.
    EntropyThreshold,
    /// Verification on minimum sampled-token probability.
    MinProbThreshold,
    DatastoreFraction,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 8] = [
        AblationAxis::UnitCount,
        AblationAxis::UnitLength,
        AblationAxis::Tau,
        AblationAxis::TR,
        AblationAxis::TV,
        AblationAxis::EntropyThreshold,
        AblationAxis::MinProbThreshold,
        AblationAxis::DatastoreFraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::UnitCount => "unit_count",
            AblationAxis::UnitLength => "unit_length",
            AblationAxis::Tau => "tau",
            AblationAxis::TR => "t_r",
            AblationAxis::TV => "t_v",
            AblationAxis::EntropyThreshold => "entropy_threshold",
            AblationAxis::MinProbThreshold => "min_prob_threshold",
            AblationAxis::DatastoreFraction => "datastore_fraction",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::config(format!("unknown ablation axis {name}")))
    }

    fn count(value: f64, what: &str) -> Result<usize> {
        if value < 0.0 || value.fract() != 0.0 {
            return Err(Error::config(format!("{what} must be a non-negative integer, got {value}")));
        }
        Ok(value as usize)
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &GenerationConfig, value: f64) -> Result<GenerationConfig> {
        let mut c = base.clone();
        match self {
            AblationAxis::UnitCount => c.memory.k_r = Self::count(value, "unit_count")?,
            AblationAxis::UnitLength => {
                c.memory.context_offset = Some(c.memory.offset());
                c.memory.unit_len = Self::count(value, "unit_length")?;
            }
            AblationAxis::Tau => c.retrieval.tau = value,
            AblationAxis::TR => c.triggers.retrieval = Trigger::Fixed { interval: Self::count(value, "t_r")? },
            AblationAxis::TV => c.triggers.verification = Trigger::Fixed { interval: Self::count(value, "t_v")? },
            AblationAxis::EntropyThreshold => c.triggers.verification = Trigger::Entropy { threshold: value },
            AblationAxis::MinProbThreshold => c.triggers.verification = Trigger::MinProb { threshold: value },
            AblationAxis::DatastoreFraction => c.retrieval.fraction = value,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub claims: f64,
    pub steps: usize,
    pub wall_ms: f64,
    pub retrieved_passages: usize,
    pub backtracks: usize,
}

/// One row per `(value, seed)`, averaged over prompts. Scores use `cap`.
pub fn run_ablation(
    ctx: &BenchContext<'_>,
    grid: &AblationGrid,
    base: &GenerationConfig,
    prompts: &[PromptCase],
    cap: usize,
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    let configs: Vec<GenerationConfig> = grid
        .values
        .iter()
        .map(|&v| grid.axis.apply(base, v))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (vi, _) in grid.values.iter().enumerate() {
        for &seed in &grid.seeds {
            for p in prompts {
                jobs.push((vi, seed, p));
            }
        }
    }
    let results = par::map(exec, &jobs, |&(vi, seed, p)| ctx.run(&configs[vi], p, seed));
    let mut grouped: BTreeMap<(usize, usize), Vec<RunRecord>> = BTreeMap::new();
    for (&(vi, seed, _), r) in jobs.iter().zip(results) {
        let si = grid.seeds.iter().position(|s| *s == seed).unwrap();
        grouped.entry((vi, si)).or_default().push(r?);
    }
    let mut rows = Vec::new();
    for ((vi, si), runs) in grouped {
        let n = runs.len().max(1) as f64;
        let scores: Vec<FactualityScore> = runs
            .iter()
            .map(|r| FactualityScore::from_counts(r.supported, r.extracted, cap))
            .collect::<Result<_>>()?;
        rows.push(AblationRow {
            axis: grid.axis.name().to_string(),
            value: grid.values[vi],
            seed: grid.seeds[si],
            precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
            f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
            claims: scores.iter().map(|s| s.extracted as f64).sum::<f64>() / n,
            steps: runs.iter().map(|r| r.steps).sum(),
            wall_ms: runs.iter().map(|r| r.wall_ms).sum(),
            retrieved_passages: runs.iter().map(|r| r.retrieved_passages).sum(),
            backtracks: runs.iter().map(|r| r.backtracks).sum(),
        });
    }
    Ok(rows)
}

/// CSV with `#` comment lines carrying the base config and code version.
pub fn ablation_csv(rows: &[AblationRow], config: &Value) -> Result<String> {
    let mut out = format!(
        "# code_version: {}\n# config: {}\n",
        env!("CARGO_PKG_VERSION"),
        serde_json::to_string(config)?
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
    out.push_str(&String::from_utf8(body).map_err(|e| Error::format("csv", e.to_string()))?);
    Ok(out)
}

/// Parses CSV written by [`ablation_csv`], skipping comment lines.
pub fn read_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
