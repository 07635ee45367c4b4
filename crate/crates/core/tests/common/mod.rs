#![allow(dead_code)]

pub mod mock;

use ewe_core::model::{ModelConfig, TransformerWeights};

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_positions: 64,
        seed,
    }
}

pub fn tiny_model(seed: u64) -> TransformerWeights {
    TransformerWeights::init(tiny_config(seed)).unwrap()
}

/// `max |a - b| / max |b|` over two equally sized vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Explicit-loop softmax attention of one query over `(key, value, multiplicity)`
/// rows, each `n_heads × head_dim` wide.
pub fn softmax_attention(query: &[f64], rows: &[(&[f64], &[f64], f64)], n_heads: usize, head_dim: usize) -> Vec<f64> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; n_heads * head_dim];
    for h in 0..n_heads {
        let lo = h * head_dim;
        let logits: Vec<f64> = rows
            .iter()
            .map(|(k, _, _)| {
                let mut s = 0.0;
                for d in 0..head_dim {
                    s += query[lo + d] * k[lo + d];
                }
                s * scale
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (i, (_, v, c)) in rows.iter().enumerate() {
            let w = c * (logits[i] - m).exp();
            z += w;
            for d in 0..head_dim {
                out[lo + d] += w * v[lo + d];
            }
        }
        for d in 0..head_dim {
            out[lo + d] /= z;
        }
    }
    out
}

/// Single softmax over the union of all branch tokens, each context token
/// counted once per branch that contains it.
pub fn replicated_union(
    query: &[f64],
    units: &[(Vec<f64>, Vec<f64>)],
    context: &(Vec<f64>, Vec<f64>),
    n_heads: usize,
    head_dim: usize,
    context_branch: bool,
) -> Vec<f64> {
    let w = n_heads * head_dim;
    let copies = units.len() as f64 + if context_branch { 1.0 } else { 0.0 };
    let mut rows: Vec<(&[f64], &[f64], f64)> = Vec::new();
    for (k, v) in units {
        for t in 0..k.len() / w {
            rows.push((&k[t * w..(t + 1) * w], &v[t * w..(t + 1) * w], 1.0));
        }
    }
    let (k, v) = context;
    for t in 0..k.len() / w {
        rows.push((&k[t * w..(t + 1) * w], &v[t * w..(t + 1) * w], copies));
    }
    softmax_attention(query, &rows, n_heads, head_dim)
}

/// Random uniform vector in `[-scale, scale)`.
pub fn random_vec(rng: &mut impl rand::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Tokenizer matching `tiny_config`: seven reserved tokens plus six words.
pub fn tiny_tokenizer() -> ewe_core::model::Tokenizer {
    ewe_core::model::Tokenizer::from_words(["a", "b", "c", "d", "e", "f"])
}
