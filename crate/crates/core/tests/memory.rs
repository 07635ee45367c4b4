mod common;

use common::{tiny_model, tiny_tokenizer};
use ewe_core::attention::AggregationConfig;
use ewe_core::memory::{encode_unit, encode_units, FeedbackKind, MemoryUnit, PrecomputeStore, WorkingMemory};
use ewe_core::model::{encode, KvCache, LanguageModel, BOS};
use ewe_core::par::Execution;
use proptest::prelude::*;

fn dummy(id: u64, kind: FeedbackKind) -> MemoryUnit {
    MemoryUnit {
        id,
        kind,
        source_text: format!("u{id}"),
        source_id: None,
        tokens: vec![7],
        kv: KvCache::new(0, 1, 1, 0),
        inserted_at_step: 0,
    }
}

proptest! {
    #[test]
    fn fifo_pools_keep_the_newest(k_r in 0usize..4, k_v in 0usize..4, kinds in prop::collection::vec(any::<bool>(), 0..40)) {
        let mut mem = WorkingMemory::new(k_r, k_v);
        let mut pushed: Vec<(u64, FeedbackKind)> = Vec::new();
        for is_r in kinds {
            let kind = if is_r { FeedbackKind::Retrieval } else { FeedbackKind::Factcheck };
            let id = mem.allocate_id();
            let cap = if is_r { k_r } else { k_v };
            let same: Vec<u64> = pushed.iter().filter(|p| p.1 == kind).map(|p| p.0).collect();
            let expect_evicted = if same.len() + 1 > cap {
                Some(if cap == 0 { id } else { same[same.len() - cap] })
            } else {
                None
            };
            let evicted = mem.push(dummy(id, kind)).unwrap();
            prop_assert_eq!(evicted.map(|u| u.id), expect_evicted);
            pushed.push((id, kind));
        }
        for (kind, cap) in [(FeedbackKind::Retrieval, k_r), (FeedbackKind::Factcheck, k_v)] {
            let ids: Vec<u64> = pushed.iter().filter(|p| p.1 == kind).map(|p| p.0).collect();
            let keep = &ids[ids.len().saturating_sub(cap)..];
            let held: Vec<u64> = mem.pool(kind).units().map(|u| u.id).collect();
            prop_assert_eq!(held.as_slice(), keep);
        }
    }
}

#[test]
fn wrong_kind_is_rejected() {
    let mut mem = WorkingMemory::new(2, 2);
    assert!(mem.retrieval.push_fifo(dummy(1, FeedbackKind::Factcheck)).is_err());
}

#[test]
fn units_are_encoded_at_positions_from_zero() {
    let w = tiny_model(2);
    let tok = tiny_tokenizer();
    let u = encode_unit(&w, &tok, "a b c d e", FeedbackKind::Retrieval, 3, 16, 1).unwrap();
    assert_eq!(u.kv.positions(), &[0, 1, 2, 3, 4]);
    assert_eq!(u.inserted_at_step, 3);
    let again = encode_unit(&w, &tok, "a b c d e", FeedbackKind::Retrieval, 3, 16, 1).unwrap();
    assert_eq!(u, again);
    assert!(encode_unit(&w, &tok, "  ", FeedbackKind::Retrieval, 0, 16, 1).is_err());
}

#[test]
fn long_feedback_is_truncated_to_the_unit_length() {
    let w = tiny_model(3);
    let tok = tiny_tokenizer();
    let text = "a b c d e f a b c d e f a b c d e f a b c d e f a b c d e f a b".to_string();
    let u = encode_unit(&w, &tok, &text, FeedbackKind::Factcheck, 0, 16, 1).unwrap();
    assert_eq!(u.token_count(), 16);
    assert_eq!(u.kv, encode(&w, &tok.tokenize(&text)[..16], 0).unwrap());
}

#[test]
fn refresh_leaves_other_encodings_untouched() {
    let w = tiny_model(4);
    let tok = tiny_tokenizer();
    let mut mem = WorkingMemory::new(2, 2);
    let texts = [("a b c", FeedbackKind::Retrieval), ("d e", FeedbackKind::Retrieval), ("f a", FeedbackKind::Factcheck)];
    for (t, kind) in texts {
        let id = mem.allocate_id();
        mem.push(encode_unit(&w, &tok, t, kind, 0, 16, id).unwrap()).unwrap();
    }
    let before: Vec<MemoryUnit> = mem.units().into_iter().cloned().collect();
    let id = mem.allocate_id();
    let evicted = mem.push(encode_unit(&w, &tok, "b b b", FeedbackKind::Retrieval, 5, 16, id).unwrap()).unwrap();
    assert_eq!(evicted.unwrap(), before[0]);
    let after = mem.units();
    assert_eq!(after[0], &before[1]);
    assert_eq!(after[2], &before[2]);
}

#[test]
fn snapshot_round_trip() {
    let mut mem = WorkingMemory::new(1, 1);
    mem.push(dummy(1, FeedbackKind::Retrieval)).unwrap();
    let snap = mem.snapshot();
    mem.push(dummy(2, FeedbackKind::Retrieval)).unwrap();
    mem.push(dummy(3, FeedbackKind::Factcheck)).unwrap();
    mem.restore(&snap);
    assert_eq!(mem.units().iter().map(|u| u.id).collect::<Vec<_>>(), vec![1]);
}

#[test]
fn parallel_and_sequential_encoding_agree() {
    let w = tiny_model(5);
    let tok = tiny_tokenizer();
    let texts: Vec<(String, Option<String>)> = ["a b", "c d e", "f", "a a a a"].iter().map(|t| (t.to_string(), Some(t.to_string()))).collect();
    let mut m1 = WorkingMemory::new(4, 0);
    let mut m2 = WorkingMemory::new(4, 0);
    let a = encode_units(&w, &tok, &mut m1, &texts, FeedbackKind::Retrieval, 0, 16, Execution::Sequential);
    let b = encode_units(&w, &tok, &mut m2, &texts, FeedbackKind::Retrieval, 0, 16, Execution::Parallel);
    let a: Vec<MemoryUnit> = a.into_iter().map(Result::unwrap).collect();
    let b: Vec<MemoryUnit> = b.into_iter().map(Result::unwrap).collect();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|u| u.id).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn precompute_store_hits_misses_and_persists() {
    let w = tiny_model(6);
    let tokens = [8, 9, 10, 3];
    let mut store = PrecomputeStore::new();
    let (kv1, hit1) = store.lookup_or_encode(&w, "p1", &tokens).unwrap();
    let (kv2, hit2) = store.lookup_or_encode(&w, "p1", &tokens).unwrap();
    assert!(!hit1 && hit2);
    assert_eq!(kv1, kv2);
    assert_eq!((store.hits(), store.misses()), (1, 1));

    let mut other = w.clone();
    other.tensors_mut()[0].data_mut()[0] += 0.5;
    assert_ne!(other.fingerprint(), w.fingerprint());
    let (kv3, hit3) = store.lookup_or_encode(&other, "p1", &tokens).unwrap();
    assert!(!hit3);
    assert_eq!(kv3, encode(&other, &tokens, 0).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let (fresh, _) = store.lookup_or_encode(&w, "p1", &tokens).unwrap();
    store.save(dir.path()).unwrap();
    let mut loaded = PrecomputeStore::load(dir.path()).unwrap();
    assert_eq!(loaded.len(), 1);
    let (cached, hit) = loaded.lookup_or_encode(&w, "p1", &tokens).unwrap();
    assert!(hit);

    let unit = |kv: KvCache| MemoryUnit {
        id: 1,
        kind: FeedbackKind::Retrieval,
        source_text: String::new(),
        source_id: Some("p1".into()),
        tokens: tokens.to_vec(),
        kv,
        inserted_at_step: 0,
    };
    let logits = |u: &MemoryUnit| {
        let mut ctx = w.new_context(16);
        w.step(&[u], &mut ctx, &[BOS, 8], &[BOS, 8], AggregationConfig::default()).unwrap()
    };
    assert_eq!(logits(&unit(cached)), logits(&unit(fresh)));
}
