mod common;

use common::{rel_err, tiny_model};
use ewe_core::attention::AggregationConfig;
use ewe_core::model::flat::{causal_logits, forward, loss, loss_and_grad, FlatSequence};
use ewe_core::model::train::mean_loss;
use ewe_core::model::{encode, forward_step, train, KvCache, TokenId, TrainConfig, TrainingExample, TransformerWeights};
use ewe_core::par::Execution;
use ewe_core::Error;

fn cached_logits_each_step(w: &TransformerWeights, memory: &[&KvCache], tokens: &[TokenId], start: usize, agg: AggregationConfig) -> Vec<Vec<f64>> {
    let c = w.config;
    let mut kv = KvCache::new(c.n_layers, c.n_heads, c.d_model, start);
    tokens
        .iter()
        .map(|&t| forward_step(w, memory, &mut kv, &[t], agg).unwrap())
        .collect()
}

#[test]
fn empty_memory_equals_plain_causal_pass() {
    for seed in 0..5 {
        let w = tiny_model(seed);
        let tokens: Vec<TokenId> = (0..11).map(|i| ((i * 7 + seed as u32) % 13) as TokenId).collect();
        let full = causal_logits(&w, &tokens, 5).unwrap();
        let inc = cached_logits_each_step(&w, &[], &tokens, 5, AggregationConfig::default());
        for (a, b) in inc.iter().zip(&full) {
            assert!(rel_err(a, b) < 1e-9);
        }
    }
}

#[test]
fn chunked_prefill_matches_token_by_token() {
    let w = tiny_model(3);
    let tokens: Vec<TokenId> = vec![4, 8, 1, 12, 3, 3, 9];
    let c = w.config;
    let mut kv = KvCache::new(c.n_layers, c.n_heads, c.d_model, 0);
    let a = forward_step(&w, &[], &mut kv, &tokens[..4], AggregationConfig::default()).unwrap();
    let b = forward_step(&w, &[], &mut kv, &tokens[4..], AggregationConfig::default()).unwrap();
    let inc = cached_logits_each_step(&w, &[], &tokens, 0, AggregationConfig::default());
    assert!(rel_err(&a, &inc[3]) < 1e-9);
    assert!(rel_err(&b, &inc[6]) < 1e-9);
    kv.check_consistent().unwrap();
}

#[test]
fn forward_is_deterministic() {
    let w = tiny_model(1);
    let unit = encode(&w, &[3, 4, 5], 0).unwrap();
    let run = || cached_logits_each_step(&w, &[&unit], &[7, 8, 9], 10, AggregationConfig::default());
    assert_eq!(run(), run());
}

#[test]
fn position_overflow_is_a_capacity_error() {
    let w = tiny_model(1);
    let c = w.config;
    let mut kv = KvCache::new(c.n_layers, c.n_heads, c.d_model, c.max_positions - 2);
    forward_step(&w, &[], &mut kv, &[1, 2], AggregationConfig::default()).unwrap();
    let err = forward_step(&w, &[], &mut kv, &[3], AggregationConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Capacity { .. }));
    assert_eq!(kv.len(), 2);
}

/// The full-sequence pass with memory blocks and `ln r` context bias must agree
/// with decoding through per-branch attention and α-aggregation.
#[test]
fn memory_training_layout_matches_branch_aggregation() {
    for (seed, context_branch) in [(0, true), (1, false), (2, true), (3, false)] {
        let w = tiny_model(seed);
        let units: Vec<Vec<TokenId>> = vec![vec![3, 4, 5, 6], vec![7, 2], vec![9, 10, 11]];
        let context: Vec<TokenId> = vec![1, 5, 8, 12, 0, 3];
        let start = 10;
        let ex = TrainingExample {
            memory: units.clone(),
            context: context.clone(),
            context_start: start,
            context_branch,
            loss_start: 0,
        };
        let seq = FlatSequence::from_example(&ex).unwrap();
        let cache = forward(&w, &seq).unwrap();
        let v = w.config.vocab_size;
        let encoded: Vec<KvCache> = units.iter().map(|u| encode(&w, u, 0).unwrap()).collect();
        let refs: Vec<&KvCache> = encoded.iter().collect();
        let agg = AggregationConfig {
            include_context_branch: context_branch,
        };
        let inc = cached_logits_each_step(&w, &refs, &context, start, agg);
        for (i, step) in inc.iter().enumerate() {
            let row = seq.context_offset + i;
            let flat = &cache.logits[row * v..(row + 1) * v];
            assert!(rel_err(step, flat) < 1e-9, "seed {seed} step {i}");
        }
    }
}

fn check_gradients(w: &TransformerWeights, ex: &TrainingExample) -> f64 {
    let seq = FlatSequence::from_example(ex).unwrap();
    let (_, grads) = loss_and_grad(w, &seq).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = w.clone();
    let names = w.tensor_names();
    for (ti, g) in grads.tensors().iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe.tensors()[ti].data()[j];
            probe.tensors_mut()[ti].data_mut()[j] = orig + eps;
            let plus = loss(&probe, &seq).unwrap();
            probe.tensors_mut()[ti].data_mut()[j] = orig - eps;
            let minus = loss(&probe, &seq).unwrap();
            probe.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = g.data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            assert!(rel < 1e-4, "{}[{j}]: analytic {analytic} numeric {numeric}", names[ti]);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_plain() {
    let w = tiny_model(11);
    let ex = TrainingExample::plain(vec![1, 4, 7, 2, 9, 4, 12, 3], 2);
    let worst = check_gradients(&w, &ex);
    assert!(worst < 1e-4);
}

#[test]
fn gradients_match_finite_differences_with_memory() {
    let w = tiny_model(12);
    let ex = TrainingExample {
        memory: vec![vec![5, 6, 7], vec![8, 9]],
        context: vec![1, 4, 7, 2, 9],
        context_start: 8,
        context_branch: true,
        loss_start: 1,
    };
    let worst = check_gradients(&w, &ex);
    assert!(worst < 1e-4);
}

#[test]
fn memorizes_one_sentence() {
    let w = tiny_model(5);
    let corpus = vec![TrainingExample::plain(vec![1, 4, 9, 6, 11, 3, 2], 0)];
    let cfg = TrainConfig {
        steps: 200,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let out = train(&w, &corpus, &cfg).unwrap();
    let last = *out.loss_trace.last().unwrap();
    let final_loss = mean_loss(&out.weights, &corpus, Execution::Sequential).unwrap();
    assert!(final_loss < 0.5, "final loss {final_loss} (last batch {last})");
    assert!(out.loss_trace[0] > final_loss);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let w = tiny_model(6);
    let corpus = vec![TrainingExample::plain(vec![1, 4, 9, 6], 0)];
    let cfg = TrainConfig {
        steps: 5,
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&w, &corpus, &cfg).unwrap();
    assert_eq!(out.weights, w);
    assert!(out.loss_trace.windows(2).all(|p| p[0] == p[1]));
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let w = tiny_model(7);
    let corpus: Vec<TrainingExample> = (0..6)
        .map(|i| TrainingExample::plain(vec![1, 3 + i, 5, 7 + i % 3, 2], 0))
        .collect();
    let run = |execution| {
        let cfg = TrainConfig {
            steps: 10,
            batch_size: 4,
            execution,
            ..TrainConfig::default()
        };
        train(&w, &corpus, &cfg).unwrap()
    };
    let a = run(Execution::Sequential);
    let b = run(Execution::Parallel);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.loss_trace, b.loss_trace);
}
