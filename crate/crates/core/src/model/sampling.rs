use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::error::{Error, Result};
use crate::tensor::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingPolicy {
    #[default]
    Greedy,
    Temperature { t: f64 },
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingPolicy::Temperature { t } if !(t > 0.0) || !t.is_finite() => Err(Error::config(
                format!("sampling temperature must be positive, got {t}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Argmax with lowest-ID tie-break.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Draws the next token under `policy`, consuming randomness from `rng` only
/// when sampling with a temperature.
pub fn sample_next(logits: &[f64], policy: SamplingPolicy, rng: &mut ChaCha8Rng) -> Result<TokenId> {
    policy.validate()?;
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampling logits".into()));
    }
    match policy {
        SamplingPolicy::Greedy => Ok(argmax(logits)),
        SamplingPolicy::Temperature { t } => {
            let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
            let probs = softmax(&scaled);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(i as TokenId);
                }
            }
            Ok((probs.len() - 1) as TokenId)
        }
    }
}

/// Stateful sampler: one seeded stream per generation.
#[derive(Debug, Clone)]
pub struct Sampler {
    policy: SamplingPolicy,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(policy: SamplingPolicy, seed: u64) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn sample(&mut self, logits: &[f64]) -> Result<TokenId> {
        sample_next(logits, self.policy, &mut self.rng)
    }
}

/// Probability of `token` and the entropy (nats) of the softmax of `logits`.
pub fn token_stats(logits: &[f64], token: TokenId) -> (f64, f64) {
    let probs = softmax(logits);
    let entropy = -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();
    (probs[token as usize], entropy)
}
