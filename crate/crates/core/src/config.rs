//! Run configuration as flat dotted-key JSON.
//!
//! `{"memory.k_r": 1, "triggers.verification.kind": "off"}` sets two fields
//! and leaves everything else at its default. Tagged enums expose their
//! `kind` plus the variant's fields.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::curriculum::CurriculumConfig;
use crate::error::{Error, Result};
use crate::feedback::ScorerKind;
use crate::model::{ModelConfig, Optimizer, TrainConfig};
use crate::orchestrator::GenerationConfig;
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompts: usize,
    pub seeds: Vec<u64>,
    pub systems: Vec<String>,
    /// Worker threads for eval and ablate; 0 uses every core.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 30,
            seeds: vec![0, 1, 2],
            systems: crate::eval::System::ALL.iter().map(|s| s.name().to_string()).collect(),
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumConfig,
    #[serde(flatten)]
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Sized for the toy world: short memory units and a small transformer.
    fn default() -> Self {
        let mut generation = GenerationConfig::default();
        generation.memory.unit_len = 16;
        generation.retrieval.scorer = ScorerKind::TfIdf;
        generation.sampling = crate::model::SamplingPolicy::Temperature { t: 1.0 };
        Self {
            model: ModelConfig {
                vocab_size: 0,
                d_model: 48,
                n_heads: 4,
                n_layers: 2,
                d_ff: 96,
                max_positions: 128,
                seed: 1,
            },
            train: TrainConfig {
                steps: 1500,
                learning_rate: 0.01,
                batch_size: 16,
                optimizer: Optimizer::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                clip_norm: 1.0,
                seed: 0,
                execution: Execution::Parallel,
            },
            curriculum: CurriculumConfig {
                memory_docs_per_entity: 16,
                ..CurriculumConfig::default()
            },
            generation,
            eval: EvalConfig::default(),
        }
    }
}

/// Flattens nested objects into dotted keys, enum objects included.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

fn same_kind(a: &Value, b: &Value) -> bool {
    matches!(
        (a, b),
        (Value::Bool(_), Value::Bool(_))
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
    )
}

/// Sets one dotted key inside `root`, checking it against the default shape.
fn set_key(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("unknown config key {key}")))?;
        let last = i + 1 == parts.len();
        if last {
            match obj.get(*part) {
                Some(old) if old.is_null() || value.is_null() || same_kind(old, &value) => {}
                Some(old) => {
                    return Err(Error::config(format!(
                        "config key {key}: expected {} but got {value}",
                        type_name(old)
                    )))
                }
                // Variant fields of tagged enums are open.
                None if obj.contains_key("kind") => {}
                None => return Err(Error::config(format!("unknown config key {key}"))),
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown config key {key}")))?;
    }
    Ok(())
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Parses a command-line value: JSON if it parses, otherwise a bare string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn to_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        Ok(flatten(&self.to_value()?))
    }

    pub fn to_flat_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_flat()?)?)
    }

    /// Applies dotted-key overrides on top of `self`.
    pub fn with_overrides<I>(&self, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Value)>,
    {
        let mut root = self.to_value()?;
        for (k, v) in overrides {
            set_key(&mut root, &k, v)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds a config from flat (or nested) JSON on top of the defaults.
    pub fn from_json(json: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(json).map_err(|e| Error::format("config", e.to_string()))?;
        if !value.is_object() {
            return Err(Error::format("config", "expected a JSON object"));
        }
        Self::default().with_overrides(flatten(&value))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_flat_json()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds must not be empty"));
        }
        for s in &self.eval.systems {
            crate::eval::System::parse(s)?;
        }
        if !(0.0..=1.0).contains(&self.curriculum.true_object_rate) {
            return Err(Error::config("curriculum.true_object_rate must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Curriculum with its context offset tied to the generation memory layout.
    pub fn curriculum(&self) -> CurriculumConfig {
        CurriculumConfig {
            unit_len: self.generation.memory.offset(),
            ..self.curriculum
        }
    }
}
