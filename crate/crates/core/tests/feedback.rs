use ewe_core::feedback::{
    build_query, check_sentence, extract_claims, render_feedback, retrieve, unsupported_count, verify, Claim, Datastore,
    FeedbackForm, Passage, ScorerKind, VerdictStatus, INSTRUCTION_PREFIX,
};
use ewe_core::toyworld::{generate_world, render_corpus, FactTriple, World, WorldSpec};
use proptest::prelude::*;

fn world() -> World {
    generate_world(&WorldSpec {
        seed: 11,
        n_entities: 10,
        ..WorldSpec::default()
    })
    .unwrap()
}

fn wrong_object(w: &World, f: &FactTriple) -> String {
    w.domains[&f.relation].iter().find(|o| **o != f.object).unwrap().clone()
}

#[test]
fn oracle_is_sound_and_complete_over_the_world() {
    let w = world();
    for f in &w.facts {
        for o in &w.domains[&f.relation] {
            let t = FactTriple::new(&f.subject, &f.relation, o);
            let sentence = w.render(&t).unwrap();
            let verdicts = check_sentence(&sentence, &w);
            assert_eq!(verdicts.len(), 1, "{sentence}");
            let want = if *o == f.object { VerdictStatus::Supported } else { VerdictStatus::Unsupported };
            assert_eq!(verdicts[0].status, want);
            assert_eq!(verdicts[0].evidence, vec![w.passage_for(&f.subject, &f.relation).unwrap()]);
        }
    }
}

#[test]
fn extraction_handles_conjunctions_and_noise() {
    let w = world();
    let a = &w.facts[0];
    let b = &w.facts[1];
    let sa = w.render(a).unwrap();
    let sb = w.render(b).unwrap();
    let joined = format!("{} and {}", sa.trim_end_matches('.'), sb);
    let claims = extract_claims(&joined, &w);
    assert_eq!(claims.iter().map(|c| c.triple.clone()).collect::<Vec<_>>(), vec![a.clone(), b.clone()]);
    assert!(claims.iter().all(|c| c.sentence == joined));

    assert!(extract_claims("The weather is nice today.", &w).is_empty());
    assert!(extract_claims(&sa.replace(&a.subject, "Nobody"), &w).is_empty());
    assert!(extract_claims(&sa.replace(&a.object, "zzz"), &w).is_empty());
}

#[test]
fn unverifiable_when_relation_unknown_for_subject() {
    let w = generate_world(&WorldSpec { seed: 3, n_entities: 6, facts_per_entity: 2, ..WorldSpec::default() }).unwrap();
    let e = &w.entities[0];
    let missing = w.spec.relations.iter().find(|r| w.object(e, &r.name).is_none()).unwrap();
    let o = w.domains[&missing.name][0].clone();
    let claim = Claim {
        text: String::new(),
        triple: FactTriple::new(e, &missing.name, &o),
        sentence: String::new(),
    };
    let v = verify(&claim, &w);
    assert_eq!(v.status, VerdictStatus::Unverifiable);
    assert!(v.evidence.is_empty());
}

#[test]
fn feedback_rendering_orders_and_dedups() {
    let w = world();
    let good = w.render(&w.facts[0]).unwrap();
    let f = &w.facts[1];
    let bad = w.render(&FactTriple::new(&f.subject, &f.relation, &wrong_object(&w, f))).unwrap();
    let mut verdicts = check_sentence(&bad, &w);
    verdicts.extend(check_sentence(&good, &w));
    verdicts.extend(check_sentence(&good, &w));
    assert_eq!(unsupported_count(&verdicts), 1);

    let truth = w.render(f).unwrap();
    let form = FeedbackForm::default();
    assert_eq!(render_feedback(&verdicts, form).unwrap(), vec![good.clone(), truth.clone()]);

    let only = FeedbackForm { include_supporting_passages: false, include_refuting_passages: false, include_instruction: true };
    assert_eq!(render_feedback(&verdicts, only).unwrap(), vec![format!("{INSTRUCTION_PREFIX} (1) {bad}")]);

    let all = FeedbackForm { include_instruction: true, ..form };
    assert_eq!(render_feedback(&verdicts, all).unwrap().len(), 3);
    assert!(render_feedback(&[], form).is_err());
}

fn store(kind: ScorerKind) -> (World, Datastore) {
    let w = world();
    let ds = Datastore::new(render_corpus(&w), kind).unwrap();
    (w, ds)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn higher_tau_returns_a_subset(i in 0usize..60, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, tfidf in any::<bool>()) {
        let (w, ds) = store(if tfidf { ScorerKind::TfIdf } else { ScorerKind::HashedTf });
        let f = &w.facts[i % w.facts.len()];
        let q = build_query(&format!("Tell me about {}.", f.subject), "");
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let loose = retrieve(&ds, &q, lo, 1000).unwrap();
        let tight = retrieve(&ds, &q, hi, 1000).unwrap();
        prop_assert!(tight.len() <= loose.len());
        for p in &tight {
            prop_assert!(p.score > hi);
            prop_assert!(loose.iter().any(|l| l.passage.id == p.passage.id));
        }
        for pair in loose.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
    }
}

#[test]
fn retrieval_finds_the_stated_fact() {
    let (w, ds) = store(ScorerKind::TfIdf);
    let f = &w.facts[5];
    let hits = retrieve(&ds, &w.render(f).unwrap(), 0.0, 1).unwrap();
    assert_eq!(hits[0].passage.id, World::passage_id(f));
    assert!(retrieve(&ds, "x", 0.0, 0).is_err());
    assert!(retrieve(&ds, "x", 1.5, 1).is_err());
}

#[test]
fn datastore_jsonl_and_sampling() {
    let (w, ds) = store(ScorerKind::HashedTf);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.jsonl");
    Datastore::write_jsonl(&path, ds.passages()).unwrap();
    assert_eq!(Datastore::read_jsonl(&path).unwrap(), ds.passages());
    std::fs::write(&path, "{\"id\": 3}\n").unwrap();
    assert!(Datastore::read_jsonl(&path).is_err());

    let half = Datastore::sample_passages(ds.passages(), 0.5, 1).unwrap();
    assert_eq!(half.len(), w.facts.len() / 2);
    assert_eq!(half, Datastore::sample_passages(ds.passages(), 0.5, 1).unwrap());
    assert!(Datastore::sample_passages(ds.passages(), 0.0, 1).unwrap().is_empty());

    let dup = vec![
        Passage { id: "a".into(), text: "x".into(), source: "s".into() },
        Passage { id: "a".into(), text: "y".into(), source: "s".into() },
    ];
    assert!(Datastore::new(dup, ScorerKind::TfIdf).is_err());
}
