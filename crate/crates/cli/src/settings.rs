//! Config assembly: defaults, then `--config`, then `--set`, then flags.

use clap::Args;
use ewe_core::config::{parse_value, RunConfig};
use ewe_core::feedback::ScorerKind;
use ewe_core::model::SamplingPolicy;
use ewe_core::orchestrator::{GenerationConfig, Trigger};

use crate::{Cli, Failure};

/// Generation settings shared by `generate`, `eval` and `ablate`.
#[derive(Debug, Clone, Default, Args)]
pub struct GenFlags {
    /// Retrieval memory units.
    #[arg(long)]
    pub k_r: Option<usize>,
    /// Fact-check memory units.
    #[arg(long)]
    pub k_v: Option<usize>,
    /// Tokens per memory unit.
    #[arg(long)]
    pub unit_len: Option<usize>,
    /// Drop the context's own branch from the attention aggregate.
    #[arg(long)]
    pub no_context_branch: bool,
    /// One retrieval with the question before decoding, nothing afterwards.
    #[arg(long)]
    pub retrieval_at_start_only: bool,
    #[arg(long)]
    pub no_retrieval: bool,
    #[arg(long)]
    pub no_verification: bool,
    /// Retrieval interval in tokens.
    #[arg(long)]
    pub t_r: Option<usize>,
    /// Verification interval in tokens.
    #[arg(long)]
    pub t_v: Option<usize>,
    /// Verify sentences whose mean token entropy exceeds this.
    #[arg(long, conflicts_with_all = ["t_v", "min_prob_threshold"])]
    pub entropy_threshold: Option<f64>,
    /// Verify sentences with a token probability below this.
    #[arg(long, conflicts_with = "t_v")]
    pub min_prob_threshold: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// hashed_tf or tf_idf.
    #[arg(long)]
    pub scorer: Option<String>,
    /// Fraction of the datastore to keep.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Reuse cached passage encodings.
    #[arg(long)]
    pub precompute: bool,
    #[arg(long, conflicts_with = "greedy")]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub greedy: bool,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub r_max: Option<usize>,
    /// Leave supporting passages out of fact-check feedback.
    #[arg(long)]
    pub no_supporting: bool,
    /// Leave refuting passages out of fact-check feedback.
    #[arg(long)]
    pub no_refuting: bool,
    /// Prefix fact-check feedback with an instruction.
    #[arg(long)]
    pub instruction: bool,
}

impl GenFlags {
    pub fn apply(&self, g: &mut GenerationConfig) -> Result<(), Failure> {
        if let Some(v) = self.k_r {
            g.memory.k_r = v;
        }
        if let Some(v) = self.k_v {
            g.memory.k_v = v;
        }
        if let Some(v) = self.unit_len {
            g.memory.unit_len = v;
        }
        if self.no_context_branch {
            g.memory.include_context_branch = false;
        }
        if self.precompute {
            g.memory.precompute = true;
        }
        if let Some(v) = self.t_r {
            g.triggers.retrieval = Trigger::Fixed { interval: v };
        }
        if let Some(v) = self.t_v {
            g.triggers.verification = Trigger::Fixed { interval: v };
        }
        if let Some(v) = self.entropy_threshold {
            g.triggers.verification = Trigger::Entropy { threshold: v };
        }
        if let Some(v) = self.min_prob_threshold {
            g.triggers.verification = Trigger::MinProb { threshold: v };
        }
        if self.no_retrieval {
            g.triggers.retrieval = Trigger::Off;
            g.retrieval.at_start = false;
        }
        if self.no_verification {
            g.triggers.verification = Trigger::Off;
        }
        if self.retrieval_at_start_only {
            g.triggers.retrieval = Trigger::Off;
            g.triggers.verification = Trigger::Off;
            g.retrieval.at_start = true;
        }
        if let Some(v) = self.tau {
            g.retrieval.tau = v;
        }
        if let Some(v) = self.top_n {
            g.retrieval.top_n = v;
        }
        if let Some(s) = &self.scorer {
            g.retrieval.scorer = match s.as_str() {
                "hashed_tf" => ScorerKind::HashedTf,
                "tf_idf" => ScorerKind::TfIdf,
                other => return Err(Failure::Usage(format!("--scorer: unknown scorer {other}"))),
            };
        }
        if let Some(v) = self.fraction {
            g.retrieval.fraction = v;
        }
        if let Some(t) = self.temperature {
            g.sampling = SamplingPolicy::Temperature { t };
        }
        if self.greedy {
            g.sampling = SamplingPolicy::Greedy;
        }
        if let Some(v) = self.max_steps {
            g.max_steps = v;
        }
        if let Some(v) = self.r_max {
            g.r_max = v;
        }
        if self.no_supporting {
            g.feedback.include_supporting_passages = false;
        }
        if self.no_refuting {
            g.feedback.include_refuting_passages = false;
        }
        if self.instruction {
            g.feedback.include_instruction = true;
        }
        Ok(())
    }
}

fn parse_set(raw: &str) -> Result<(String, serde_json::Value), Failure> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {raw}")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Builds the run config and lets `tweak` apply command flags last.
pub fn resolve(cli: &Cli, tweak: impl FnOnce(&mut RunConfig) -> Result<(), Failure>) -> Result<RunConfig, Failure> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    let sets = cli.sets.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>, _>>()?;
    let mut cfg = base.with_overrides(sets).map_err(|e| Failure::Usage(e.to_string()))?;
    tweak(&mut cfg)?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}
