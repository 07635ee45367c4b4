//! World → curriculum → trained model → benchmark, as driven by a [`RunConfig`].

use crate::config::RunConfig;
use crate::curriculum::{build_tokenizer, plain_examples, training_examples};
use crate::error::Result;
use crate::eval::{run_benchmark, BenchContext, BenchReport, System};
use crate::model::{mean_loss, train, ModelConfig, Tokenizer, TransformerWeights};
use crate::par::{self, Execution};
use crate::toyworld::{render_corpus, render_prompts, World};

pub struct Trained {
    pub weights: TransformerWeights,
    pub tokenizer: Tokenizer,
    pub loss_trace: Vec<f64>,
    /// Mean per-token loss on the plain (memory-free) documents after training.
    pub plain_loss: f64,
}

/// Model shape from `cfg` with the vocabulary size taken from `tokenizer`.
pub fn model_config(cfg: &RunConfig, tokenizer: &Tokenizer) -> ModelConfig {
    ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        ..cfg.model
    }
}

pub fn train_on_world(cfg: &RunConfig, world: &World) -> Result<Trained> {
    let tokenizer = build_tokenizer(world);
    let curriculum = cfg.curriculum();
    let corpus = training_examples(world, &tokenizer, &curriculum)?;
    let init = TransformerWeights::init(model_config(cfg, &tokenizer))?;
    let out = train(&init, &corpus, &cfg.train)?;
    let plain = plain_examples(world, &tokenizer, &curriculum)?;
    let plain_loss = mean_loss(&out.weights, &plain, cfg.train.execution)?;
    Ok(Trained {
        weights: out.weights,
        tokenizer,
        loss_trace: out.loss_trace,
        plain_loss,
    })
}

/// Runs the configured systems, prompts and seeds against `weights`.
pub fn evaluate(
    cfg: &RunConfig,
    world: &World,
    weights: &TransformerWeights,
    tokenizer: &Tokenizer,
    exec: Execution,
) -> Result<BenchReport> {
    let systems: Vec<System> = cfg.eval.systems.iter().map(|s| System::parse(s)).collect::<Result<_>>()?;
    let prompts = render_prompts(world, cfg.eval.prompts)?;
    let passages = render_corpus(world);
    let ctx = BenchContext::new(weights, tokenizer, world, &passages);
    par::with_threads(cfg.eval.threads, || {
        run_benchmark(&ctx, &cfg.generation, &systems, &prompts, &cfg.eval.seeds, exec)
    })
}
