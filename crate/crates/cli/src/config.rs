//! Flat `section.key = value` run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use frigid_core::denoiser::{ModelConfig, TrainConfig};
use frigid_core::lengthmodel::FitConfig;
use frigid_core::refine::RefineConfig;
use frigid_core::sampler::GenerationConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Range(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormulaMode {
    /// Condition on the record's declared formula.
    Known,
    /// Enumerate hypotheses from the precursor mass and split the budget.
    Hypotheses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub formula_mode: FormulaMode,
    pub n_hypotheses: usize,
    pub hypothesis_ppm: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            formula_mode: FormulaMode::Known,
            n_hypotheses: 5,
            hypothesis_ppm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliTrainConfig {
    pub checkpoint_every: usize,
}

impl Default for CliTrainConfig {
    fn default() -> Self {
        CliTrainConfig { checkpoint_every: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { repeats: 3, warmup: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpointing: CliTrainConfig,
    pub length: FitConfig,
    pub generation: GenerationConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            checkpointing: CliTrainConfig::default(),
            length: FitConfig::default(),
            generation: GenerationConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn slot<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    (!cur.is_object()).then_some(cur)
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Apply `key = value` lines on top of the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut root = serde_json::to_value(RunConfig::default()).expect("config serializes");
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, val) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, val) = (key.trim(), val.trim());
            let target = slot(&mut root, key).ok_or_else(|| ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            })?;
            let parsed = if target.is_string() {
                Value::String(val.to_string())
            } else {
                serde_json::from_str::<Value>(val).map_err(|e| ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    msg: e.to_string(),
                })?
            };
            if std::mem::discriminant(&parsed) != std::mem::discriminant(target) {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    msg: format!("expected a value like `{}`", render(target)),
                });
            }
            *target = parsed;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| ConfigError::Range(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key, one per line, in a form `parse` reads back exactly.
    pub fn serialize(&self) -> String {
        let mut flat = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        flat.iter().map(|(k, v)| format!("{k} = {}\n", render(v))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |e: String| ConfigError::Range(e);
        self.model.validate().map_err(|e| range(e.to_string()))?;
        self.train.validate().map_err(|e| range(e.to_string()))?;
        self.refine.validate().map_err(|e| range(e.to_string()))?;
        if self.generation.batch == 0 {
            return Err(range("generation.batch must be at least 1".into()));
        }
        if !(self.generation.tau0 >= 0.0) || !(self.generation.lambda >= 0.0) {
            return Err(range("generation.tau0 and generation.lambda must be non-negative".into()));
        }
        if self.eval.n_hypotheses == 0 || !(self.eval.hypothesis_ppm > 0.0) {
            return Err(range("eval.n_hypotheses and eval.hypothesis_ppm must be positive".into()));
        }
        if self.length.depth == 0 || self.length.stages == 0 || !(0.0..1.0).contains(&self.length.validation_fraction) {
            return Err(range("length: depth and stages must be positive, validation_fraction in [0, 1)".into()));
        }
        if self.checkpointing.checkpoint_every == 0 || self.bench.repeats == 0 {
            return Err(range("checkpointing.checkpoint_every and bench.repeats must be positive".into()));
        }
        Ok(())
    }

    /// Override every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.length.seed = seed;
    }
}
