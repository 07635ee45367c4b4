//! Full-sequence forward and backward passes.
//!
//! A [`FlatSequence`] lays memory units and context out as one token row with
//! explicit positions and an additive attention bias (`-inf` for masked
//! pairs). Memory tokens attend causally within their own unit; context tokens
//! see every memory token once and causal context with a `ln r` bias, where `r`
//! is the number of branches that contain the context. That is exactly the
//! replicated-union form of memory attention, so the same weights train here
//! and decode through [`super::forward::forward_step`].

use super::layers::{gelu, gelu_grad, layer_norm_row};
use super::{TokenId, TransformerWeights};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, matmul, matmul_a_bt, matmul_at_b_acc};

/// One training or evaluation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Memory units, each encoded at positions `0..len`.
    pub memory: Vec<Vec<TokenId>>,
    pub context: Vec<TokenId>,
    /// Position of the first context token.
    pub context_start: usize,
    /// Include the context-only branch (`r = k + 1`) or not (`r = k`).
    pub context_branch: bool,
    /// First context index whose next-token prediction is scored.
    pub loss_start: usize,
}

impl TrainingExample {
    pub fn plain(context: Vec<TokenId>, context_start: usize) -> Self {
        Self {
            memory: Vec::new(),
            context,
            context_start,
            context_branch: true,
            loss_start: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlatSequence {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    /// `n × n` additive bias; `NEG_INFINITY` marks an invisible key.
    pub bias: Vec<f64>,
    /// `(row, target token)` pairs scored by the loss.
    pub targets: Vec<(usize, TokenId)>,
    /// Row of the first context token.
    pub context_offset: usize,
}

impl FlatSequence {
    pub fn from_example(ex: &TrainingExample) -> Result<Self> {
        if ex.context.is_empty() {
            return Err(Error::contract("training example has an empty context"));
        }
        let mem_len: usize = ex.memory.iter().map(Vec::len).sum();
        let n = mem_len + ex.context.len();
        let mut tokens = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut bias = vec![f64::NEG_INFINITY; n * n];
        let k = ex.memory.iter().filter(|u| !u.is_empty()).count();
        let branches = if k == 0 {
            1
        } else {
            k + usize::from(ex.context_branch)
        };
        if branches == 0 {
            return Err(Error::contract("no attention branch"));
        }
        let ctx_bias = (branches as f64).ln();

        let mut row = 0;
        for unit in &ex.memory {
            let first = row;
            for (i, &t) in unit.iter().enumerate() {
                tokens.push(t);
                positions.push(i);
                for j in first..=row {
                    bias[row * n + j] = 0.0;
                }
                row += 1;
            }
        }
        let context_offset = row;
        for (i, &t) in ex.context.iter().enumerate() {
            tokens.push(t);
            positions.push(ex.context_start + i);
            for j in 0..context_offset {
                bias[row * n + j] = 0.0;
            }
            for j in context_offset..=row {
                bias[row * n + j] = ctx_bias;
            }
            row += 1;
        }
        let targets = (ex.loss_start..ex.context.len().saturating_sub(1))
            .map(|i| (context_offset + i, ex.context[i + 1]))
            .collect();
        Ok(Self {
            tokens,
            positions,
            bias,
            targets,
            context_offset,
        })
    }

    /// Plain causal sequence at positions `start..`.
    pub fn causal(tokens: &[TokenId], start: usize) -> Result<Self> {
        Self::from_example(&TrainingExample::plain(tokens.to_vec(), start))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// per head `n × n` attention probabilities
    probs: Vec<Vec<f64>>,
    attn: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub struct FlatCache {
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    xf: Vec<f64>,
    /// `n × vocab` logits for every row.
    pub logits: Vec<f64>,
}

fn ln_forward(x: &[f64], n: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let d = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let (xh, rs) = layer_norm_row(&x[r * d..(r + 1) * d], gain, bias, &mut out[r * d..(r + 1) * d]);
        xhat.extend(xh);
        rstd.push(rs);
    }
    (out, LnCache { xhat, rstd })
}

fn ln_backward(dy: &[f64], cache: &LnCache, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let d = gain.len();
    let n = cache.rstd.len();
    let mut dx = vec![0.0; dy.len()];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            let dxh = dyr[j] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            dx[r * d + j] = cache.rstd[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Forward pass over a whole sequence, keeping everything backprop needs.
pub fn forward(weights: &TransformerWeights, seq: &FlatSequence) -> Result<FlatCache> {
    let cfg = weights.config;
    let d = cfg.d_model;
    let n = seq.len();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    if n == 0 {
        return Err(Error::contract("empty sequence"));
    }
    if let Some(&p) = seq.positions.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(Error::Capacity {
            position: p,
            max_positions: cfg.max_positions,
        });
    }
    if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::contract(format!("token {t} outside vocabulary")));
    }

    let mut x = vec![0.0; n * d];
    for i in 0..n {
        let te = weights.token_embedding.row(seq.tokens[i] as usize);
        let pe = weights.position_embedding.row(seq.positions[i]);
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lw in &weights.layers {
        let (a, ln1) = ln_forward(&x, n, lw.ln1_gain.data(), lw.ln1_bias.data());
        let q = matmul(&a, lw.wq.data(), n, d, d);
        let k = matmul(&a, lw.wk.data(), n, d, d);
        let v = matmul(&a, lw.wv.data(), n, d, d);
        let mut attn = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let off = h * hd;
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + hd];
                let row = &mut p[i * n..(i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let b = seq.bias[i * n + j];
                    if b == f64::NEG_INFINITY {
                        row[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let kj = &k[j * d + off..j * d + off + hd];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale + b;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = if *r == f64::NEG_INFINITY { 0.0 } else { (*r - max).exp() };
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                let out = &mut attn[i * d + off..i * d + off + hd];
                for j in 0..n {
                    let pj = row[j];
                    if pj == 0.0 {
                        continue;
                    }
                    for (o, vv) in out.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                        *o += pj * vv;
                    }
                }
            }
            probs.push(p);
        }
        let y = matmul(&attn, lw.wo.data(), n, d, d);
        for (xv, yv) in x.iter_mut().zip(&y) {
            *xv += yv;
        }
        let (c, ln2) = ln_forward(&x, n, lw.ln2_gain.data(), lw.ln2_bias.data());
        let mut u = matmul(&c, lw.w1.data(), n, d, cfg.d_ff);
        for row in u.chunks_mut(cfg.d_ff) {
            for (uv, bv) in row.iter_mut().zip(lw.b1.data()) {
                *uv += bv;
            }
        }
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let m = matmul(&g, lw.w2.data(), n, cfg.d_ff, d);
        for i in 0..n {
            for j in 0..d {
                x[i * d + j] += m[i * d + j] + lw.b2.data()[j];
            }
        }
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            c,
            u,
            g,
        });
    }
    let (xf, final_ln) = ln_forward(&x, n, weights.final_gain.data(), weights.final_bias.data());
    let logits = matmul(&xf, weights.head.data(), n, d, cfg.vocab_size);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(FlatCache {
        layers,
        final_ln,
        xf,
        logits,
    })
}

/// Logits of every row of a plain causal pass over `tokens` at positions `start..`.
pub fn causal_logits(weights: &TransformerWeights, tokens: &[TokenId], start: usize) -> Result<Vec<Vec<f64>>> {
    let seq = FlatSequence::causal(tokens, start)?;
    let cache = forward(weights, &seq)?;
    Ok(cache
        .logits
        .chunks(weights.config.vocab_size)
        .map(<[f64]>::to_vec)
        .collect())
}

/// Summed cross-entropy over the sequence's targets.
pub fn loss(weights: &TransformerWeights, seq: &FlatSequence) -> Result<f64> {
    let cache = forward(weights, seq)?;
    Ok(target_loss(&cache.logits, weights.config.vocab_size, &seq.targets))
}

fn target_loss(logits: &[f64], vocab: usize, targets: &[(usize, TokenId)]) -> f64 {
    targets
        .iter()
        .map(|&(r, t)| {
            let row = &logits[r * vocab..(r + 1) * vocab];
            log_sum_exp(row) - row[t as usize]
        })
        .sum()
}

/// Summed cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_grad(weights: &TransformerWeights, seq: &FlatSequence) -> Result<(f64, TransformerWeights)> {
    let cfg = weights.config;
    let v = cfg.vocab_size;
    let cache = forward(weights, seq)?;
    let total = target_loss(&cache.logits, v, &seq.targets);
    let mut dlogits = vec![0.0; cache.logits.len()];
    for &(r, t) in &seq.targets {
        let row = &cache.logits[r * v..(r + 1) * v];
        let lse = log_sum_exp(row);
        let drow = &mut dlogits[r * v..(r + 1) * v];
        for j in 0..v {
            drow[j] += (row[j] - lse).exp();
        }
        drow[t as usize] -= 1.0;
    }
    let grads = backward(weights, seq, &cache, &dlogits);
    Ok((total, grads))
}

/// Backpropagates `dlogits` (`n × vocab`) through the cached forward pass.
pub fn backward(weights: &TransformerWeights, seq: &FlatSequence, cache: &FlatCache, dlogits: &[f64]) -> TransformerWeights {
    let cfg = weights.config;
    let d = cfg.d_model;
    let n = seq.len();
    let hd = cfg.head_dim();
    let ff = cfg.d_ff;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut g = TransformerWeights::zeros(cfg);

    matmul_at_b_acc(g.head.data_mut(), &cache.xf, dlogits, n, d, cfg.vocab_size);
    let dxf = matmul_a_bt(dlogits, weights.head.data(), n, cfg.vocab_size, d);
    let mut dx = {
        let (fg, fb) = (&mut g.final_gain, &mut g.final_bias);
        ln_backward(&dxf, &cache.final_ln, weights.final_gain.data(), fg.data_mut(), fb.data_mut())
    };

    for (l, lw) in weights.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let lg = &mut g.layers[l];

        // MLP: x_out = x_mid + gelu(c·w1 + b1)·w2 + b2
        for i in 0..n {
            for j in 0..d {
                lg.b2.data_mut()[j] += dx[i * d + j];
            }
        }
        matmul_at_b_acc(lg.w2.data_mut(), &lc.g, &dx, n, ff, d);
        let mut du = matmul_a_bt(&dx, lw.w2.data(), n, d, ff);
        for (duv, &uv) in du.iter_mut().zip(&lc.u) {
            *duv *= gelu_grad(uv);
        }
        for i in 0..n {
            for j in 0..ff {
                lg.b1.data_mut()[j] += du[i * ff + j];
            }
        }
        matmul_at_b_acc(lg.w1.data_mut(), &lc.c, &du, n, d, ff);
        let dc = matmul_a_bt(&du, lw.w1.data(), n, ff, d);
        let dmid = ln_backward(&dc, &lc.ln2, lw.ln2_gain.data(), lg.ln2_gain.data_mut(), lg.ln2_bias.data_mut());
        for (a, b) in dx.iter_mut().zip(&dmid) {
            *a += b;
        }

        // attention: x_mid = x_in + attn·wo
        matmul_at_b_acc(lg.wo.data_mut(), &lc.attn, &dx, n, d, d);
        let dattn = matmul_a_bt(&dx, lw.wo.data(), n, d, d);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for h in 0..cfg.n_heads {
            let off = h * hd;
            let p = &lc.probs[h];
            for i in 0..n {
                let dout = &dattn[i * d + off..i * d + off + hd];
                let prow = &p[i * n..(i + 1) * n];
                // dP_ij = dout_i · v_j ; dV_j += P_ij dout_i
                let mut dp = vec![0.0; n];
                let mut weighted = 0.0;
                for j in 0..n {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let vj = &lc.v[j * d + off..j * d + off + hd];
                    dp[j] = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                    weighted += prow[j] * dp[j];
                    for (dvv, &o) in dv[j * d + off..j * d + off + hd].iter_mut().zip(dout) {
                        *dvv += prow[j] * o;
                    }
                }
                for j in 0..n {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    for t in 0..hd {
                        dq[i * d + off + t] += ds * lc.k[j * d + off + t];
                        dk[j * d + off + t] += ds * lc.q[i * d + off + t];
                    }
                }
            }
        }
        matmul_at_b_acc(lg.wq.data_mut(), &lc.a, &dq, n, d, d);
        matmul_at_b_acc(lg.wk.data_mut(), &lc.a, &dk, n, d, d);
        matmul_at_b_acc(lg.wv.data_mut(), &lc.a, &dv, n, d, d);
        let mut da = matmul_a_bt(&dq, lw.wq.data(), n, d, d);
        for (t, w) in [(&dk, &lw.wk), (&dv, &lw.wv)] {
            for (a, b) in da.iter_mut().zip(matmul_a_bt(t, w.data(), n, d, d)) {
                *a += b;
            }
        }
        let din = ln_backward(&da, &lc.ln1, lw.ln1_gain.data(), lg.ln1_gain.data_mut(), lg.ln1_bias.data_mut());
        for (a, b) in dx.iter_mut().zip(&din) {
            *a += b;
        }
    }

    for i in 0..n {
        let t = seq.tokens[i] as usize;
        let p = seq.positions[i];
        for j in 0..d {
            g.token_embedding.data_mut()[t * d + j] += dx[i * d + j];
            g.position_embedding.data_mut()[p * d + j] += dx[i * d + j];
        }
    }
    g
}
