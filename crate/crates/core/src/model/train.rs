//! First-order training over [`TrainingExample`]s.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flat::{loss, loss_and_grad, FlatSequence, TrainingExample};
use super::TransformerWeights;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball momentum SGD.
    Momentum { momentum: f64 },
    /// Adam with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Momentum { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Examples per step; 0 means the full corpus.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
            batch_size: 0,
            optimizer: Optimizer::default(),
            clip_norm: 1.0,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: TransformerWeights,
    /// Mean next-token loss (nats/token) of each step's batch, before the update.
    pub loss_trace: Vec<f64>,
}

/// Mean loss in nats per scored token.
pub fn mean_loss(weights: &TransformerWeights, corpus: &[TrainingExample], exec: Execution) -> Result<f64> {
    let parts = par::map(exec, corpus, |ex| -> Result<(f64, usize)> {
        let seq = FlatSequence::from_example(ex)?;
        Ok((loss(weights, &seq)?, seq.targets.len()))
    });
    let mut total = 0.0;
    let mut count = 0;
    for p in parts {
        let (l, c) = p?;
        total += l;
        count += c;
    }
    Ok(total / count.max(1) as f64)
}

pub fn train(weights: &TransformerWeights, corpus: &[TrainingExample], config: &TrainConfig) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    let seqs = corpus
        .iter()
        .map(FlatSequence::from_example)
        .collect::<Result<Vec<_>>>()?;
    let mut w = weights.clone();
    let n_params = w.parameter_count();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = if config.batch_size == 0 {
        seqs.len()
    } else {
        config.batch_size.min(seqs.len())
    };
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                if batch < seqs.len() {
                    order.shuffle(&mut rng);
                }
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let results = par::map(config.execution, &picked, |&i| loss_and_grad(&w, &seqs[i]));
        let mut total_loss = 0.0;
        let mut count = 0usize;
        let mut grad = vec![0.0; n_params];
        for (r, &i) in results.into_iter().zip(&picked) {
            let (l, g) = r?;
            total_loss += l;
            count += seqs[i].targets.len();
            let mut off = 0;
            for t in g.tensors() {
                for (acc, v) in grad[off..off + t.len()].iter_mut().zip(t.data()) {
                    *acc += v;
                }
                off += t.len();
            }
        }
        let count = count.max(1) as f64;
        let mean = total_loss / count;
        if !mean.is_finite() {
            return Err(Error::Divergence { step, loss: mean });
        }
        trace.push(mean);
        for g in &mut grad {
            *g /= count;
        }
        if config.clip_norm > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.clip_norm {
                let s = config.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }

        let lr = config.learning_rate;
        let mut off = 0;
        for t in w.tensors_mut() {
            let len = t.len();
            let data = t.data_mut();
            for j in 0..len {
                let g = grad[off + j];
                let delta = match config.optimizer {
                    Optimizer::Momentum { momentum } => {
                        m1[off + j] = momentum * m1[off + j] + g;
                        m1[off + j]
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        m1[off + j] = beta1 * m1[off + j] + (1.0 - beta1) * g;
                        m2[off + j] = beta2 * m2[off + j] + (1.0 - beta2) * g * g;
                        let mh = m1[off + j] / (1.0 - beta1.powi(step as i32 + 1));
                        let vh = m2[off + j] / (1.0 - beta2.powi(step as i32 + 1));
                        mh / (vh.sqrt() + eps)
                    }
                };
                data[j] -= lr * delta;
            }
            off += len;
        }
    }
    w.check_finite().map_err(|_| Error::Divergence {
        step: config.steps,
        loss: f64::NAN,
    })?;
    Ok(TrainOutcome {
        weights: w,
        loss_trace: trace,
    })
}
