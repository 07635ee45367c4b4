//! A closed synthetic knowledge world.
//!
//! Entities carry at most one object per relation. Every relation renders
//! through a fixed sentence template, so the world doubles as the grammar for
//! claim extraction. The training corpus replaces a seeded fraction of objects
//! with wrong ones from the same domain; that corruption record is what the
//! base model later hallucinates from.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::Passage;

pub const SUBJECT_SLOT: &str = "<E>";
pub const OBJECT_SLOT: &str = "<O>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    /// Four-digit years.
    Year,
    /// Round resident counts.
    Count,
    /// Capitalized synthetic names.
    Name,
    /// Lowercase synthetic words.
    Word,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    /// Sentence with one `<E>` and one `<O>` slot, each a single word.
    pub template: String,
    pub domain: DomainKind,
    pub domain_size: usize,
}

impl RelationSpec {
    pub fn new(name: &str, template: &str, domain: DomainKind, domain_size: usize) -> Self {
        Self {
            name: name.into(),
            template: template.into(),
            domain,
            domain_size,
        }
    }
}

pub fn default_relations() -> Vec<RelationSpec> {
    vec![
        RelationSpec::new("founded_in", "<E> was founded in <O>.", DomainKind::Year, 8),
        RelationSpec::new("located_in", "<E> is located in <O>.", DomainKind::Name, 8),
        RelationSpec::new("led_by", "<E> is led by <O>.", DomainKind::Name, 8),
        RelationSpec::new("known_for", "<E> is known for <O>.", DomainKind::Word, 8),
        RelationSpec::new("colored", "<E> is colored <O>.", DomainKind::Word, 8),
        RelationSpec::new("counts", "<E> has <O> residents.", DomainKind::Count, 8),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_entities: usize,
    pub relations: Vec<RelationSpec>,
    pub facts_per_entity: usize,
    pub corruption_rate: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 30,
            relations: default_relations(),
            facts_per_entity: 6,
            corruption_rate: 0.3,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0 {
            return Err(Error::config("n_entities must be at least 1"));
        }
        if self.relations.is_empty() {
            return Err(Error::config("relations must not be empty"));
        }
        if self.facts_per_entity == 0 || self.facts_per_entity > self.relations.len() {
            return Err(Error::config(format!(
                "facts_per_entity must be in 1..={} (one object per relation)",
                self.relations.len()
            )));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(Error::config("corruption_rate must lie in [0, 1)"));
        }
        let mut names = HashSet::new();
        for r in &self.relations {
            if !names.insert(r.name.as_str()) {
                return Err(Error::config(format!("duplicate relation {}", r.name)));
            }
            if r.domain_size < 2 {
                return Err(Error::config(format!(
                    "relation {}: domain_size {} leaves no distinct corrupted object",
                    r.name, r.domain_size
                )));
            }
            let words: Vec<&str> = r.template.split_whitespace().collect();
            let slots = |s: &str| words.iter().filter(|w| w.trim_end_matches('.') == s).count();
            if slots(SUBJECT_SLOT) != 1 || slots(OBJECT_SLOT) != 1 || !r.template.ends_with('.') {
                return Err(Error::config(format!(
                    "relation {}: template must contain <E> and <O> once and end with '.'",
                    r.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl FactTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub subject: String,
    pub relation: String,
    pub true_object: String,
    pub wrong_object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    pub entities: Vec<String>,
    /// Object vocabulary per relation, in relation order.
    pub domains: BTreeMap<String, Vec<String>>,
    /// Facts grouped by entity, relations in spec order.
    pub facts: Vec<FactTriple>,
    /// Training-corpus corruptions drawn with the spec's rate and seed.
    pub corruptions: Vec<Corruption>,
    #[serde(skip)]
    index: HashMap<(String, String), usize>,
}

fn syllable(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap())
}

fn synthetic_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>, capitalized: bool) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let mut w: String = (0..n).map(|_| syllable(rng)).collect();
        if rng.gen_bool(0.5) {
            w.push(*['n', 'r', 's', 'l'].choose(rng).unwrap());
        }
        if capitalized {
            w = w[..1].to_uppercase() + &w[1..];
        }
        if used.insert(w.to_lowercase()) {
            return w;
        }
    }
}

fn domain_values(kind: DomainKind, size: usize, rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let v = match kind {
            DomainKind::Year => rng.gen_range(1100..1900).to_string(),
            DomainKind::Count => (rng.gen_range(10..1000) * 100).to_string(),
            DomainKind::Name => synthetic_word(rng, used, true),
            DomainKind::Word => synthetic_word(rng, used, false),
        };
        if matches!(kind, DomainKind::Year | DomainKind::Count) && !used.insert(v.clone()) {
            continue;
        }
        out.push(v);
    }
    out
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used = HashSet::new();
    let entities: Vec<String> = (0..spec.n_entities)
        .map(|_| synthetic_word(&mut rng, &mut used, true))
        .collect();
    let mut domains = BTreeMap::new();
    for r in &spec.relations {
        domains.insert(r.name.clone(), domain_values(r.domain, r.domain_size, &mut rng, &mut used));
    }
    let mut facts = Vec::new();
    for e in &entities {
        let mut chosen: Vec<usize> = (0..spec.relations.len()).collect();
        if spec.facts_per_entity < chosen.len() {
            chosen.shuffle(&mut rng);
            chosen.truncate(spec.facts_per_entity);
            chosen.sort_unstable();
        }
        for ri in chosen {
            let r = &spec.relations[ri];
            let object = domains[&r.name].choose(&mut rng).unwrap().clone();
            facts.push(FactTriple::new(e, &r.name, &object));
        }
    }
    let mut world = World {
        spec: spec.clone(),
        entities,
        domains,
        facts,
        corruptions: Vec::new(),
        index: HashMap::new(),
    };
    world.reindex();
    world.corruptions = world.corrupt(spec.corruption_rate, spec.seed);
    Ok(world)
}

impl World {
    fn reindex(&mut self) {
        self.index = self
            .facts
            .iter()
            .enumerate()
            .map(|(i, f)| ((f.subject.clone(), f.relation.clone()), i))
            .collect();
    }

    pub fn relation(&self, name: &str) -> Option<&RelationSpec> {
        self.spec.relations.iter().find(|r| r.name == name)
    }

    /// The true object for `(subject, relation)`, if the world has one.
    pub fn object(&self, subject: &str, relation: &str) -> Option<&str> {
        self.index
            .get(&(subject.to_string(), relation.to_string()))
            .map(|&i| self.facts[i].object.as_str())
    }

    pub fn contains(&self, triple: &FactTriple) -> bool {
        self.object(&triple.subject, &triple.relation) == Some(triple.object.as_str())
    }

    pub fn facts_of(&self, entity: &str) -> Vec<&FactTriple> {
        self.facts.iter().filter(|f| f.subject == entity).collect()
    }

    pub fn is_entity(&self, word: &str) -> bool {
        self.entities.iter().any(|e| e == word)
    }

    /// Entities and every relation's objects.
    pub fn is_vocabulary_word(&self, word: &str) -> bool {
        self.is_entity(word) || self.domains.values().any(|d| d.iter().any(|o| o == word))
    }

    /// Renders a triple through its relation template.
    pub fn render(&self, triple: &FactTriple) -> Result<String> {
        let r = self
            .relation(&triple.relation)
            .ok_or_else(|| Error::contract(format!("unknown relation {}", triple.relation)))?;
        Ok(r.template
            .replace(SUBJECT_SLOT, &triple.subject)
            .replace(OBJECT_SLOT, &triple.object))
    }

    pub fn passage_id(triple: &FactTriple) -> String {
        format!("{}:{}", triple.subject, triple.relation)
    }

    /// The datastore passage stating the true fact for `(subject, relation)`.
    pub fn passage_for(&self, subject: &str, relation: &str) -> Option<Passage> {
        let i = *self.index.get(&(subject.to_string(), relation.to_string()))?;
        let f = &self.facts[i];
        Some(Passage {
            id: Self::passage_id(f),
            text: self.render(f).ok()?,
            source: "world".into(),
        })
    }

    /// Draws the corruption record for a given rate and seed.
    pub fn corrupt(&self, corruption_rate: f64, seed: u64) -> Vec<Corruption> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let mut out = Vec::new();
        for f in &self.facts {
            if rng.gen::<f64>() < corruption_rate {
                let wrong: Vec<&String> = self.domains[&f.relation].iter().filter(|o| **o != f.object).collect();
                let w = wrong.choose(&mut rng).unwrap();
                out.push(Corruption {
                    subject: f.subject.clone(),
                    relation: f.relation.clone(),
                    true_object: f.object.clone(),
                    wrong_object: (*w).clone(),
                });
            }
        }
        out
    }

    /// Facts as the training corpus states them, with the world's corruption record applied.
    pub fn training_facts(&self) -> Vec<FactTriple> {
        apply_corruptions(&self.facts, &self.corruptions)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let mut w: World = serde_json::from_str(json)?;
        w.spec.validate()?;
        w.reindex();
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn apply_corruptions(facts: &[FactTriple], corruptions: &[Corruption]) -> Vec<FactTriple> {
    let wrong: HashMap<(&str, &str), &str> = corruptions
        .iter()
        .map(|c| ((c.subject.as_str(), c.relation.as_str()), c.wrong_object.as_str()))
        .collect();
    facts
        .iter()
        .map(|f| match wrong.get(&(f.subject.as_str(), f.relation.as_str())) {
            Some(o) => FactTriple::new(&f.subject, &f.relation, o),
            None => f.clone(),
        })
        .collect()
}

/// One datastore passage per fact, always true.
pub fn render_corpus(world: &World) -> Vec<Passage> {
    world
        .facts
        .iter()
        .map(|f| Passage {
            id: World::passage_id(f),
            text: world.render(f).expect("world relations are known"),
            source: "world".into(),
        })
        .collect()
}

/// Training sentences, one per fact, with objects corrupted at `corruption_rate`.
pub fn render_training_corpus(world: &World, corruption_rate: f64, seed: u64) -> (Vec<String>, Vec<Corruption>) {
    let corruptions = world.corrupt(corruption_rate, seed);
    let lines = apply_corruptions(&world.facts, &corruptions)
        .iter()
        .map(|f| world.render(f).expect("world relations are known"))
        .collect();
    (lines, corruptions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCase {
    pub entity: String,
    pub prompt: String,
    pub gold: Vec<FactTriple>,
}

pub fn prompt_for(entity: &str) -> String {
    format!("Tell me about {entity}. Provide as many specific details and examples as possible.")
}

/// Prompts for the first `n` entities, each with the entity's true facts as gold.
pub fn render_prompts(world: &World, n: usize) -> Result<Vec<PromptCase>> {
    if n > world.entities.len() {
        return Err(Error::config(format!(
            "requested {n} prompts but the world has {} entities",
            world.entities.len()
        )));
    }
    Ok(world.entities[..n]
        .iter()
        .map(|e| PromptCase {
            entity: e.clone(),
            prompt: prompt_for(e),
            gold: world.facts_of(e).into_iter().cloned().collect(),
        })
        .collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
