//! Training data for the toy base model.
//!
//! Plain documents are a prompt followed by the entity's facts as the
//! training corpus states them, so the model memorizes the corrupted ones.
//! Memory documents put fact passages into memory units and make the
//! response repeat whatever object the memory states for that relation,
//! including objects that disagree with the corpus. Distractor units about
//! other entities must be ignored. Together they give a model that
//! hallucinates without feedback and copies from memory when it has it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::INSTRUCTION_PREFIX;
use crate::model::{TokenId, Tokenizer, TrainingExample, BOS, EOS};
use crate::toyworld::{prompt_for, FactTriple, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Position of the first context token; set from the generation memory offset.
    #[serde(skip, default = "default_unit_len")]
    pub unit_len: usize,
    /// Memory documents per entity.
    pub memory_docs_per_entity: usize,
    /// Upper bound on memory units in one document.
    pub max_units: usize,
    /// Probability that a memory passage states the true object rather than a random one.
    pub true_object_rate: f64,
    /// Score the prompt tokens too, not just the response.
    pub score_prompt: bool,
    pub seed: u64,
}

fn default_unit_len() -> usize {
    16
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            unit_len: default_unit_len(),
            memory_docs_per_entity: 8,
            max_units: 6,
            true_object_rate: 0.5,
            score_prompt: false,
            seed: 0,
        }
    }
}

/// Vocabulary covering every sentence the world can render plus the prompts.
pub fn build_tokenizer(world: &World) -> Tokenizer {
    let mut texts = vec![INSTRUCTION_PREFIX.to_string()];
    for e in &world.entities {
        texts.push(prompt_for(e));
    }
    for r in &world.spec.relations {
        for o in &world.domains[&r.name] {
            texts.push(r.template.replace("<E>", &world.entities[0]).replace("<O>", o));
        }
    }
    Tokenizer::from_texts(texts.iter().map(String::as_str))
}

fn tokens_of(tokenizer: &Tokenizer, text: &str) -> Result<Vec<TokenId>> {
    let t = tokenizer.tokenize(text);
    if t.contains(&crate::model::UNK) {
        return Err(Error::contract(format!("text outside the vocabulary: {text}")));
    }
    Ok(t)
}

/// `[BOS] prompt` tokens.
pub fn prompt_tokens(tokenizer: &Tokenizer, entity: &str) -> Result<Vec<TokenId>> {
    let mut t = vec![BOS];
    t.extend(tokens_of(tokenizer, &prompt_for(entity))?);
    Ok(t)
}

fn document(world: &World, tokenizer: &Tokenizer, entity: &str, facts: &[FactTriple]) -> Result<(Vec<TokenId>, usize)> {
    let mut ctx = prompt_tokens(tokenizer, entity)?;
    let prompt_len = ctx.len();
    for f in facts {
        ctx.extend(tokens_of(tokenizer, &world.render(f)?)?);
    }
    ctx.push(EOS);
    Ok((ctx, prompt_len))
}

fn example(memory: Vec<Vec<TokenId>>, doc: (Vec<TokenId>, usize), cfg: &CurriculumConfig, branch: bool) -> TrainingExample {
    let (context, prompt_len) = doc;
    TrainingExample {
        memory,
        context,
        context_start: cfg.unit_len,
        context_branch: branch,
        loss_start: if cfg.score_prompt { 0 } else { prompt_len - 1 },
    }
}

/// One plain document per entity, facts as the corrupted corpus states them.
pub fn plain_examples(world: &World, tokenizer: &Tokenizer, cfg: &CurriculumConfig) -> Result<Vec<TrainingExample>> {
    let corpus = world.training_facts();
    world
        .entities
        .iter()
        .map(|e| {
            let facts: Vec<FactTriple> = corpus.iter().filter(|f| &f.subject == e).cloned().collect();
            Ok(example(Vec::new(), document(world, tokenizer, e, &facts)?, cfg, true))
        })
        .collect()
}

/// Memory-copy documents.
pub fn memory_examples(world: &World, tokenizer: &Tokenizer, cfg: &CurriculumConfig) -> Result<Vec<TrainingExample>> {
    if cfg.max_units == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d65_6d6f);
    let corpus = world.training_facts();
    let mut out = Vec::new();
    for e in &world.entities {
        let own: Vec<FactTriple> = corpus.iter().filter(|f| &f.subject == e).cloned().collect();
        for _ in 0..cfg.memory_docs_per_entity {
            let n_units = rng.gen_range(1..=cfg.max_units);
            let n_own = rng.gen_range(0..=n_units.min(own.len()));
            let mut response = own.clone();
            let mut picks: Vec<usize> = (0..own.len()).collect();
            picks.shuffle(&mut rng);
            let mut units = Vec::new();
            for &i in &picks[..n_own] {
                let f = &own[i];
                let truth = world.object(&f.subject, &f.relation).unwrap_or(&f.object).to_string();
                let object = if rng.gen_bool(cfg.true_object_rate) {
                    truth
                } else {
                    world.domains[&f.relation].choose(&mut rng).unwrap().clone()
                };
                response[i].object = object;
                units.push(tokens_of(tokenizer, &world.render(&response[i])?)?);
            }
            while units.len() < n_units {
                let other = world.facts.choose(&mut rng).unwrap();
                if &other.subject == e {
                    continue;
                }
                units.push(tokens_of(tokenizer, &world.render(other)?)?);
            }
            units.shuffle(&mut rng);
            for u in &mut units {
                u.truncate(cfg.unit_len);
            }
            let branch = rng.gen_bool(0.5);
            out.push(example(units, document(world, tokenizer, e, &response)?, cfg, branch));
        }
    }
    Ok(out)
}

/// Plain documents followed by memory documents.
pub fn training_examples(world: &World, tokenizer: &Tokenizer, cfg: &CurriculumConfig) -> Result<Vec<TrainingExample>> {
    let mut all = plain_examples(world, tokenizer, cfg)?;
    all.extend(memory_examples(world, tokenizer, cfg)?);
    Ok(all)
}
