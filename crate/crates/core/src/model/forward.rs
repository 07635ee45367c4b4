//! Incremental, KV-cached forward pass with memory-augmented attention.

use super::layers::{gelu, layer_norm_row, layer_norm_rows};
use super::{KvCache, TokenId, TransformerWeights};
use crate::attention::{attend, AggregationConfig, HeadGeometry, KvSegment};
use crate::error::{Error, Result};
use crate::tensor::matmul;

/// Feeds `new_tokens` through the model, extending `state` with their keys and
/// values, and returns the next-token logits after the last of them.
///
/// Each layer attends through [`attend`] over the memory units and the cached
/// context. With no memory units the context-only branch is always used, which
/// makes the pass an ordinary causal transformer step.
pub fn forward_step(
    weights: &TransformerWeights,
    memory: &[&KvCache],
    state: &mut KvCache,
    new_tokens: &[TokenId],
    aggregation: AggregationConfig,
) -> Result<Vec<f64>> {
    let cfg = weights.config;
    let d = cfg.d_model;
    let n = new_tokens.len();
    if n == 0 {
        return Err(Error::contract("forward_step needs at least one new token"));
    }
    if state.n_layers() != cfg.n_layers || state.width() != d {
        return Err(Error::contract("context cache does not match the model shape"));
    }
    for unit in memory {
        if unit.n_layers() != cfg.n_layers || unit.width() != d || unit.is_empty() {
            return Err(Error::contract("memory unit does not match the model shape"));
        }
    }
    if let Some(&bad) = new_tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::contract(format!("token {bad} outside vocabulary")));
    }
    let start = state.next_position();
    if start + n > cfg.max_positions {
        return Err(Error::Capacity {
            position: start + n - 1,
            max_positions: cfg.max_positions,
        });
    }
    let aggregation = if memory.is_empty() {
        AggregationConfig {
            include_context_branch: true,
        }
    } else {
        aggregation
    };

    let before = state.len();
    let result = run_layers(weights, memory, state, new_tokens, start, aggregation);
    if result.is_err() {
        state.truncate(before);
    }
    result
}

fn run_layers(
    weights: &TransformerWeights,
    memory: &[&KvCache],
    state: &mut KvCache,
    new_tokens: &[TokenId],
    start: usize,
    aggregation: AggregationConfig,
) -> Result<Vec<f64>> {
    let cfg = weights.config;
    let d = cfg.d_model;
    let n = new_tokens.len();
    let geom = HeadGeometry {
        n_heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
    };

    let mut x = vec![0.0; n * d];
    for (i, &t) in new_tokens.iter().enumerate() {
        let te = weights.token_embedding.row(t as usize);
        let pe = weights.position_embedding.row(start + i);
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }
    let positions: Vec<usize> = (start..start + n).collect();
    state.push_positions(&positions);
    let base = state.len() - n;

    for (l, lw) in weights.layers.iter().enumerate() {
        let a = layer_norm_rows(&x, n, lw.ln1_gain.data(), lw.ln1_bias.data());
        let q = matmul(&a, lw.wq.data(), n, d, d);
        let k = matmul(&a, lw.wk.data(), n, d, d);
        let v = matmul(&a, lw.wv.data(), n, d, d);
        state.append_layer(l, &k, &v);

        let layer = state.layer(l);
        let context = KvSegment::new(&layer.keys, &layer.values);
        let mem: Vec<KvSegment<'_>> = memory
            .iter()
            .map(|m| KvSegment::new(&m.layer(l).keys, &m.layer(l).values))
            .collect();
        let mut attn = vec![0.0; n * d];
        for i in 0..n {
            let visible = context.prefix(base + i + 1, d);
            let h = attend(&q[i * d..(i + 1) * d], &mem, visible, geom, aggregation)?;
            attn[i * d..(i + 1) * d].copy_from_slice(&h);
        }
        let y = matmul(&attn, lw.wo.data(), n, d, d);
        for (xv, yv) in x.iter_mut().zip(&y) {
            *xv += yv;
        }

        let c = layer_norm_rows(&x, n, lw.ln2_gain.data(), lw.ln2_bias.data());
        let mut u = matmul(&c, lw.w1.data(), n, d, cfg.d_ff);
        for row in u.chunks_mut(cfg.d_ff) {
            for (uv, bv) in row.iter_mut().zip(lw.b1.data()) {
                *uv = gelu(*uv + bv);
            }
        }
        let m = matmul(&u, lw.w2.data(), n, cfg.d_ff, d);
        for (i, row) in m.chunks(d).enumerate() {
            for j in 0..d {
                x[i * d + j] += row[j] + lw.b2.data()[j];
            }
        }
    }

    let mut last = vec![0.0; d];
    layer_norm_row(
        &x[(n - 1) * d..],
        weights.final_gain.data(),
        weights.final_bias.data(),
        &mut last,
    );
    let logits = matmul(&last, weights.head.data(), 1, d, cfg.vocab_size);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(logits)
}

/// Encodes `tokens` in isolation (no memory, causal) at positions `start..`.
pub fn encode(weights: &TransformerWeights, tokens: &[TokenId], start: usize) -> Result<KvCache> {
    let cfg = weights.config;
    let mut kv = KvCache::new(cfg.n_layers, cfg.n_heads, cfg.d_model, start);
    forward_step(weights, &[], &mut kv, tokens, AggregationConfig::default())?;
    Ok(kv)
}
