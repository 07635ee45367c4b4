use std::collections::HashSet;

use ewe_core::feedback::{check_sentence, VerdictStatus};
use ewe_core::toyworld::{generate_world, render_corpus, render_prompts, render_training_corpus, World, WorldSpec};

fn world(n_entities: usize, facts_per_entity: usize, seed: u64) -> World {
    generate_world(&WorldSpec {
        seed,
        n_entities,
        facts_per_entity,
        ..WorldSpec::default()
    })
    .unwrap()
}

#[test]
fn corruption_rate_is_respected() {
    let w = world(200, 5, 9);
    assert_eq!(w.facts.len(), 1000);
    let (lines, corruptions) = render_training_corpus(&w, 0.3, 4);
    assert_eq!(lines.len(), 1000);
    assert!((250..=350).contains(&corruptions.len()), "{}", corruptions.len());
    for c in &corruptions {
        assert_ne!(c.true_object, c.wrong_object);
        assert_eq!(w.object(&c.subject, &c.relation), Some(c.true_object.as_str()));
    }
    let wrong = lines.iter().filter(|l| check_sentence(l, &w).iter().any(|v| v.status == VerdictStatus::Unsupported)).count();
    assert_eq!(wrong, corruptions.len());
}

#[test]
fn one_true_passage_per_fact() {
    let w = world(40, 6, 2);
    let passages = render_corpus(&w);
    assert_eq!(passages.len(), w.facts.len());
    let ids: HashSet<&str> = passages.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids.len(), passages.len());
    for p in &passages {
        assert!(check_sentence(&p.text, &w).iter().all(|v| v.status == VerdictStatus::Supported));
    }
}

#[test]
fn generation_is_seeded() {
    assert_eq!(world(10, 4, 3), world(10, 4, 3));
    assert_ne!(world(10, 4, 3).entities, world(10, 4, 5).entities);
}

#[test]
fn prompts_carry_gold_facts() {
    let w = world(12, 6, 1);
    let prompts = render_prompts(&w, 5).unwrap();
    assert_eq!(prompts.len(), 5);
    for p in &prompts {
        assert!(p.prompt.starts_with(&format!("Tell me about {}.", p.entity)));
        assert_eq!(p.gold.len(), 6);
        assert!(p.gold.iter().all(|f| f.subject == p.entity && w.contains(f)));
    }
    assert!(render_prompts(&w, 13).is_err());
}

#[test]
fn json_round_trip() {
    let w = world(8, 3, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.json");
    w.save(&path).unwrap();
    let back = World::load(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.object(&w.facts[0].subject, &w.facts[0].relation), Some(w.facts[0].object.as_str()));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = WorldSpec { facts_per_entity: 7, ..WorldSpec::default() };
    assert!(generate_world(&bad).is_err());
    let bad = WorldSpec { corruption_rate: 1.0, ..WorldSpec::default() };
    assert!(generate_world(&bad).is_err());
}
