mod common;

use common::mock::fixture;
use ewe_core::eval::{
    ablation_csv, config_diff, median_cap, read_ablation_csv, run_ablation, run_benchmark, score_response, AblationAxis,
    AblationGrid, BenchContext, FactualityScore, System,
};
use ewe_core::feedback::ScorerKind;
use ewe_core::orchestrator::GenerationConfig;
use ewe_core::par::Execution;
use ewe_core::toyworld::{render_corpus, render_prompts, FactTriple};
use proptest::prelude::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn score_examples() {
    let s = FactualityScore::from_counts(3, 4, 10).unwrap();
    assert!(close(s.precision, 0.75) && close(s.recall, 0.3));
    assert!(close(s.f1, 2.0 * 0.75 * 0.3 / 1.05));
    let s = FactualityScore::from_counts(12, 12, 10).unwrap();
    assert!(close(s.recall, 1.0) && close(s.f1, 1.0));
    let s = FactualityScore::from_counts(0, 0, 10).unwrap();
    assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    let s = FactualityScore::from_counts(0, 5, 10).unwrap();
    assert_eq!((s.precision, s.f1), (0.0, 0.0));
    assert!(FactualityScore::from_counts(1, 0, 10).is_err());
    assert!(FactualityScore::from_counts(1, 1, 0).is_err());
    assert_eq!(median_cap(&[3, 1, 2, 8]), 3);
    assert_eq!(median_cap(&[0, 0, 0]), 1);
    assert_eq!(median_cap(&[]), 1);
}

proptest! {
    #[test]
    fn larger_caps_never_raise_f1(n in 0usize..40, s_frac in 0.0f64..=1.0, c1 in 1usize..60, c2 in 1usize..60) {
        let s = (s_frac * n as f64).floor() as usize;
        let (lo, hi) = (c1.min(c2), c1.max(c2));
        let a = FactualityScore::from_counts(s, n, lo).unwrap();
        let b = FactualityScore::from_counts(s, n, hi).unwrap();
        prop_assert_eq!(a.precision, b.precision);
        prop_assert!(b.recall <= a.recall && b.f1 <= a.f1 + 1e-15);
    }
}

#[test]
fn response_scoring_dedups_and_ignores_order() {
    let fx = fixture(4);
    let w = &fx.world;
    let f = &fx.facts;
    let mut sentences = vec![
        fx.sentence(&f[0]),
        fx.sentence(&f[1]),
        fx.sentence(&fx.wrong(&f[2])),
        fx.sentence(&f[0]),
        "Something unrelated happened.".to_string(),
    ];
    let text = sentences.join(" ");
    let s = score_response(&text, w, 10).unwrap();
    assert_eq!((s.supported, s.extracted), (2, 3));
    sentences.reverse();
    assert_eq!(score_response(&sentences.join(" "), w, 10).unwrap(), s);
    let conj = format!("{} and {}", fx.sentence(&f[0]).trim_end_matches('.'), fx.sentence(&f[3]));
    assert_eq!(score_response(&conj, w, 10).unwrap().supported, 2);

    // A relation the entity has no fact for is extracted but never supported.
    let missing = w.spec.relations.iter().find(|r| w.object(&fx.entity, &r.name).is_none());
    if let Some(r) = missing {
        let t = FactTriple::new(&fx.entity, &r.name, &w.domains[&r.name][0]);
        let s = score_response(&w.render(&t).unwrap(), w, 10).unwrap();
        assert_eq!((s.supported, s.extracted), (0, 1));
    }
}

fn base() -> GenerationConfig {
    let mut c = GenerationConfig::default();
    c.memory.unit_len = 16;
    c.retrieval.scorer = ScorerKind::TfIdf;
    c.max_steps = 200;
    c
}

#[test]
fn systems_differ_only_in_intended_fields() {
    let full = System::EweFull.config(&base());
    for sys in System::ALL {
        let diff = config_diff(&full, &sys.config(&base())).unwrap();
        let intended = sys.intended_diff();
        assert!(diff.iter().all(|f| intended.contains(&f.as_str())), "{}: {diff:?}", sys.name());
        assert_eq!(diff.is_empty(), sys == System::EweFull);
        assert_eq!(System::parse(sys.name()).unwrap(), sys);
    }
    assert!(System::parse("ewe").is_err());
}

#[test]
fn benchmark_rows_and_ordering() {
    let fx = fixture(4);
    let passages = render_corpus(&fx.world);
    let lm = fx.world_model(16, 4);
    let ctx = BenchContext::new(&lm, &fx.tokenizer, &fx.world, &passages);
    let prompts = render_prompts(&fx.world, 3).unwrap();
    let systems = [System::EweFull, System::RagK1];
    let seq = run_benchmark(&ctx, &base(), &systems, &prompts, &[0, 1], Execution::Sequential).unwrap();
    assert_eq!(seq.rows.len(), 2 * 3 * 2);
    assert_eq!(seq.cap, 4);
    let par = run_benchmark(&ctx, &base(), &systems, &prompts, &[0, 1], Execution::Parallel).unwrap();
    let strip = |r: &ewe_core::eval::BenchReport| r.rows.iter().map(|x| (x.system, x.prompt, x.run.response.clone(), x.score)).collect::<Vec<_>>();
    assert_eq!(strip(&seq), strip(&par));
    let full = seq.summary(System::EweFull).unwrap();
    assert!(close(full.precision, 1.0), "{}", full.precision);
    assert!(seq.summary(System::Plain).is_none());

    let header: serde_json::Value = serde_json::from_str(seq.to_jsonl(&serde_json::json!({"k": 1})).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["config"]["k"], 1);
}

#[test]
fn ablation_grid_rows_and_csv() {
    let fx = fixture(4);
    let passages = render_corpus(&fx.world);
    let lm = fx.world_model(16, 4);
    let ctx = BenchContext::new(&lm, &fx.tokenizer, &fx.world, &passages);
    let prompts = render_prompts(&fx.world, 2).unwrap();
    let grid = AblationGrid { axis: AblationAxis::UnitCount, values: vec![1.0, 2.0, 4.0, 8.0], seeds: vec![0, 1, 2] };
    let rows = run_ablation(&ctx, &grid, &base(), &prompts, 4, Execution::Parallel).unwrap();
    assert_eq!(rows.len(), 12);
    let csv = ablation_csv(&rows, &serde_json::json!({"axis": "unit_count"})).unwrap();
    assert!(csv.starts_with("# code_version: "));
    assert_eq!(read_ablation_csv(&csv).unwrap(), rows);
    assert!(AblationAxis::UnitCount.apply(&base(), 1.5).is_err());
}

#[test]
fn empty_datastore_matches_no_retrieval() {
    let fx = fixture(4);
    let passages = render_corpus(&fx.world);
    let lm = fx.world_model(16, 4);
    let ctx = BenchContext::new(&lm, &fx.tokenizer, &fx.world, &passages);
    let prompts = render_prompts(&fx.world, 3).unwrap();
    let empty = AblationAxis::DatastoreFraction.apply(&base(), 0.0).unwrap();
    let none = System::EweNoRetrieval.config(&base());
    for p in &prompts {
        let a = ctx.run(&empty, p, 0).unwrap();
        let b = ctx.run(&none, p, 0).unwrap();
        assert_eq!(a.retrieved_passages, 0);
        assert_eq!(a.response, b.response);
    }
}
