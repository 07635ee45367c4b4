//! Memory-augmented attention.
//!
//! Every memory unit forms one branch together with the context; an optional
//! extra branch sees the context alone. Each branch runs ordinary scaled
//! dot-product attention and reports its hidden vector `h_i` plus the mass
//! `α_i` of its exponentiated logits. The layer output is
//!
//! ```text
//! h = Σ_i α_i · h_i / Σ_j α_j
//! ```
//!
//! computed per head and per query token. All branches of one aggregation use
//! the same max-shift, so the `α_i` are directly comparable; the result equals a
//! single softmax over the union of branch tokens in which every context token
//! appears once per branch containing it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, KvCache, TokenId, TransformerWeights};
use crate::tensor::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Adds the `(k+1)`-th branch that attends to the context only.
    pub include_context_branch: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            include_context_branch: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadGeometry {
    pub n_heads: usize,
    pub head_dim: usize,
}

impl HeadGeometry {
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Contiguous cached keys and values, row-major `[len × n_heads × head_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct KvSegment<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
}

impl<'a> KvSegment<'a> {
    pub fn new(keys: &'a [f64], values: &'a [f64]) -> Self {
        Self { keys, values }
    }

    pub fn len(&self, width: usize) -> usize {
        self.keys.len() / width
    }

    /// First `n` tokens only (the causal prefix visible to a query).
    pub fn prefix(&self, n: usize, width: usize) -> Self {
        Self {
            keys: &self.keys[..n * width],
            values: &self.values[..n * width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBranchResult {
    /// `[n_heads × head_dim]`, a convex combination of the branch's values.
    pub hidden: Vec<f64>,
    /// Per-head mass of max-shifted exponentiated logits; always > 0.
    pub alpha: Vec<f64>,
}

/// Per-head maximum attention logit over all tokens of all segments.
pub fn max_logits(query: &[f64], segments: &[KvSegment<'_>], geom: HeadGeometry) -> Vec<f64> {
    let width = geom.width();
    let scale = geom.scale();
    let mut out = vec![f64::NEG_INFINITY; geom.n_heads];
    for seg in segments {
        for t in 0..seg.len(width) {
            let krow = &seg.keys[t * width..(t + 1) * width];
            for (h, m) in out.iter_mut().enumerate() {
                let r = h * geom.head_dim..(h + 1) * geom.head_dim;
                let l = dot(&query[r.clone()], &krow[r]) * scale;
                if l > *m {
                    *m = l;
                }
            }
        }
    }
    out
}

/// Scaled dot-product attention of one query over the concatenation of `segments`.
///
/// `shift` is the per-head constant subtracted from every logit; it must be
/// shared by all branches that will be aggregated together.
pub fn branch_attention(
    query: &[f64],
    segments: &[KvSegment<'_>],
    geom: HeadGeometry,
    shift: &[f64],
) -> Result<AttentionBranchResult> {
    let width = geom.width();
    let hd = geom.head_dim;
    if query.len() != width || shift.len() != geom.n_heads {
        return Err(Error::contract("query/shift size does not match head geometry"));
    }
    let total: usize = segments.iter().map(|s| s.len(width)).sum();
    if total == 0 {
        return Err(Error::contract("attention branch has no tokens"));
    }
    let scale = geom.scale();
    let mut hidden = vec![0.0; width];
    let mut alpha = vec![0.0; geom.n_heads];
    for seg in segments {
        for t in 0..seg.len(width) {
            let krow = &seg.keys[t * width..(t + 1) * width];
            let vrow = &seg.values[t * width..(t + 1) * width];
            for h in 0..geom.n_heads {
                let r = h * hd..(h + 1) * hd;
                let w = (dot(&query[r.clone()], &krow[r.clone()]) * scale - shift[h]).exp();
                alpha[h] += w;
                for (o, &v) in hidden[r.clone()].iter_mut().zip(&vrow[r]) {
                    *o += w * v;
                }
            }
        }
    }
    for h in 0..geom.n_heads {
        if !(alpha[h] > 0.0) || !alpha[h].is_finite() {
            return Err(Error::NonFinite(format!("attention mass of head {h}")));
        }
        for o in &mut hidden[h * hd..(h + 1) * hd] {
            *o /= alpha[h];
        }
    }
    Ok(AttentionBranchResult { hidden, alpha })
}

/// `Σ α_i h_i / Σ α_j`, per head.
pub fn aggregate(branches: &[AttentionBranchResult]) -> Result<Vec<f64>> {
    let first = branches
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one branch"))?;
    let n_heads = first.alpha.len();
    let width = first.hidden.len();
    if n_heads == 0 || width % n_heads != 0 {
        return Err(Error::contract("branch has inconsistent head layout"));
    }
    if branches
        .iter()
        .any(|b| b.alpha.len() != n_heads || b.hidden.len() != width)
    {
        return Err(Error::contract("branches disagree on head count"));
    }
    let hd = width / n_heads;
    let mut out = vec![0.0; width];
    for h in 0..n_heads {
        let total: f64 = branches.iter().map(|b| b.alpha[h]).sum();
        for b in branches {
            let w = b.alpha[h] / total;
            for (o, &v) in out[h * hd..(h + 1) * hd].iter_mut().zip(&b.hidden[h * hd..(h + 1) * hd]) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Full memory-augmented attention for one query: builds the `k` memory
/// branches (`[unit; context]`) plus the optional context-only branch, shares
/// one max-shift across them and aggregates.
pub fn attend(
    query: &[f64],
    memory: &[KvSegment<'_>],
    context: KvSegment<'_>,
    geom: HeadGeometry,
    config: AggregationConfig,
) -> Result<Vec<f64>> {
    if memory.is_empty() && !config.include_context_branch {
        return Err(Error::contract(
            "no memory units and the context branch is disabled: nothing to attend to",
        ));
    }
    let mut all: Vec<KvSegment<'_>> = memory.to_vec();
    all.push(context);
    let shift = max_logits(query, &all, geom);
    let mut branches = Vec::with_capacity(memory.len() + 1);
    for unit in memory {
        branches.push(branch_attention(query, &[*unit, context], geom, &shift)?);
    }
    if config.include_context_branch {
        branches.push(branch_attention(query, &[context], geom, &shift)?);
    }
    aggregate(&branches)
}

/// Runs `context` against exactly one memory unit with the context-only branch
/// disabled: the configuration under which memory attention reduces to
/// ordinary prepend-the-passage attention.
pub fn degeneration_forward(
    weights: &TransformerWeights,
    unit: &KvCache,
    context: &[TokenId],
    context_start: usize,
) -> Result<Vec<f64>> {
    if unit.is_empty() {
        return Err(Error::contract("memory unit must not be empty"));
    }
    if context_start < unit.next_position() {
        return Err(Error::contract("context must start after the memory positions"));
    }
    let cfg = weights.config;
    let mut state = KvCache::new(cfg.n_layers, cfg.n_heads, cfg.d_model, context_start);
    forward::forward_step(
        weights,
        &[unit],
        &mut state,
        context,
        AggregationConfig {
            include_context_branch: false,
        },
    )
}

/// Variant of [`degeneration_forward`] that checks the unit count explicitly.
pub fn degeneration_forward_units(
    weights: &TransformerWeights,
    units: &[&KvCache],
    context: &[TokenId],
    context_start: usize,
) -> Result<Vec<f64>> {
    match units {
        [unit] => degeneration_forward(weights, unit, context, context_start),
        _ => Err(Error::contract(format!(
            "degeneration requires exactly one memory unit, got {}",
            units.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const G1: HeadGeometry = HeadGeometry {
        n_heads: 1,
        head_dim: 1,
    };

    #[test]
    fn single_token_branch_returns_its_value() {
        let q = [0.7];
        let k = [1.3];
        let v = [4.5];
        let shift = [0.2];
        let r = branch_attention(&q, &[KvSegment::new(&k, &v)], G1, &shift).unwrap();
        assert_eq!(r.hidden, vec![4.5]);
        assert!((r.alpha[0] - (0.7f64 * 1.3 - 0.2).exp()).abs() < 1e-15);
    }

    #[test]
    fn equal_logits_average_values() {
        let q = [0.0];
        let k = [1.0, 2.0, 3.0, 4.0];
        let v = [1.0, 2.0, 3.0, 6.0];
        let r = branch_attention(&q, &[KvSegment::new(&k, &v)], G1, &[0.0]).unwrap();
        assert!((r.hidden[0] - 3.0).abs() < 1e-15);
        assert!((r.alpha[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn empty_branch_is_rejected() {
        let r = branch_attention(&[0.0], &[KvSegment::new(&[], &[])], G1, &[0.0]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn hand_computed_two_branch_case() {
        // context value 1.0, memory value 3.0, all logits equal
        let q = [0.0];
        let ctx = KvSegment::new(&[1.0], &[1.0]);
        let mem = KvSegment::new(&[1.0], &[3.0]);
        let shift = [0.0];
        let b1 = branch_attention(&q, &[mem, ctx], G1, &shift).unwrap();
        let b2 = branch_attention(&q, &[ctx], G1, &shift).unwrap();
        assert_eq!((b1.hidden[0], b1.alpha[0]), (2.0, 2.0));
        assert_eq!((b2.hidden[0], b2.alpha[0]), (1.0, 1.0));
        let h = aggregate(&[b1, b2]).unwrap();
        assert!((h[0] - 5.0 / 3.0).abs() < 1e-15);
        let via_attend = attend(&q, &[mem], ctx, G1, AggregationConfig::default()).unwrap();
        assert!((via_attend[0] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_branch_aggregate_is_identity() {
        let b = AttentionBranchResult {
            hidden: vec![0.25, -1.5],
            alpha: vec![3.0, 0.5],
        };
        assert_eq!(aggregate(std::slice::from_ref(&b)).unwrap(), b.hidden);
    }

    #[test]
    fn mismatched_heads_are_rejected() {
        let a = AttentionBranchResult {
            hidden: vec![0.0; 4],
            alpha: vec![1.0; 2],
        };
        let b = AttentionBranchResult {
            hidden: vec![0.0; 4],
            alpha: vec![1.0; 4],
        };
        assert!(matches!(aggregate(&[a, b]), Err(Error::Contract(_))));
        assert!(matches!(aggregate(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn no_branches_configuration_is_rejected() {
        let ctx = KvSegment::new(&[1.0], &[1.0]);
        let cfg = AggregationConfig {
            include_context_branch: false,
        };
        assert!(attend(&[0.0], &[], ctx, G1, cfg).is_err());
    }
}
