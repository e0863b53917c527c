//! Run configuration: one TOML document with a section per module.
//!
//! Resolution is layered: built-in defaults, then the config file, then
//! `key=value` overrides with dotted keys (`rollout.horizon=4`). Unknown keys are
//! rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{AblationSpec, EvalConfig};
use crate::grpo::RlConfig;
use crate::model::ModelConfig;
use crate::rewards::RewardConfig;
use crate::rollout::RolloutConfig;
use crate::tokens::TokenizerConfig;
use crate::train::{PretrainConfig, SftConfig};
use crate::world::{ExpertConfig, ScenarioKind, ScenarioParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("override `{0}` is not of the form key=value")]
    OverrideSyntax(String),
    #[error("override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// A `gen-data` run directory; unset means the latest one under the output root.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub kinds: Vec<ScenarioKind>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train_clips: 100,
            eval_clips: 100,
            kinds: ScenarioKind::ALL.to_vec(),
        }
    }
}

/// Checkpoint inputs for consuming stages; unset means the latest run of the
/// producing stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft: Option<PathBuf>,
    /// Evaluated checkpoint; unset means the latest rl run, else the latest sft run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// Episode seeds per evaluation clip.
    pub seeds_per_clip: usize,
    /// Forces one ego planner instead of the best by training reward.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planner: Option<usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seeds_per_clip: 2, planner: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Training seeds per row, derived from the master seed.
    pub seeds: usize,
    /// Name of the row every delta is taken against.
    pub baseline: String,
    pub rows: Vec<AblationSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: 5, baseline: "sft_only".into(), rows: default_matrix() }
    }
}

/// The default ablation matrix: the full pipeline, the single-step SFT
/// baseline, the reward-term ladder and the reactive-agent sweep.
pub fn default_matrix() -> Vec<AblationSpec> {
    let full = AblationSpec::default();
    vec![
        AblationSpec { name: "sft_only".into(), sft_rollout: false, rl: false, ..full.clone() },
        AblationSpec { name: "rollout_sft".into(), rl: false, ..full.clone() },
        AblationSpec { name: "reward_g".into(), reward_vehicle: false, reward_diversity: false, ..full.clone() },
        AblationSpec { name: "reward_gr".into(), reward_diversity: false, ..full.clone() },
        full.clone(),
        AblationSpec { name: "single_planner".into(), multi_planner: false, ..full.clone() },
        AblationSpec { name: "nr0".into(), n_reactive: 0, ..full.clone() },
        AblationSpec { name: "nr4".into(), n_reactive: 4, ..full },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(with = "seed_value")]
    pub seed: u64,
    pub workers: usize,
    pub data: DataConfig,
    pub checkpoints: CheckpointPaths,
    pub scenario: ScenarioParams,
    pub expert: ExpertConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub sft: SftConfig,
    pub rollout: RolloutConfig,
    pub reward: RewardConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub suite: SuiteConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 1,
            data: DataConfig::default(),
            checkpoints: CheckpointPaths::default(),
            scenario: ScenarioParams::default(),
            expert: ExpertConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            sft: SftConfig::default(),
            rollout: RolloutConfig::default(),
            reward: RewardConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
            suite: SuiteConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Seeds are written as TOML integers when they fit, else as decimal strings.
mod seed_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*v) {
            Ok(i) => s.serialize_i64(i),
            Err(_) => s.serialize_str(&v.to_string()),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(i) => u64::try_from(i).map_err(|_| serde::de::Error::custom("seed must be non-negative")),
            Raw::Text(t) => t.parse().map_err(|_| serde::de::Error::custom(format!("seed {t:?} is not an unsigned integer"))),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides`; validated.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (origin, text) = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                (p.display().to_string(), text)
            }
            None => ("<defaults>".to_string(), String::new()),
        };
        let cfg = Self::parse_with_overrides(&origin, &text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with_overrides("<config>", text, &[])
    }

    fn parse_with_overrides(origin: &str, text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let parse_err = |e: toml::de::Error| ConfigError::Parse { origin: origin.to_string(), message: e.to_string() };
        // Parsing the text directly keeps line numbers in file errors.
        let from_file: Self = toml::from_str(text).map_err(parse_err)?;
        if overrides.is_empty() {
            return Ok(from_file);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(ov.clone()))?;
            let key = canonical_key(key.trim());
            if key.is_empty() || key.split('.').any(str::is_empty) {
                return Err(ConfigError::OverrideSyntax(ov.clone()));
            }
            set_dotted(&mut table, key, parse_value(value.trim()))
                .map_err(|message| ConfigError::Override { key: key.to_string(), message })?;
            // Check each override on its own so the error names the right key.
            Self::deserialize(toml::Value::Table(table.clone()))
                .map_err(|e| ConfigError::Override { key: key.to_string(), message: e.to_string() })?;
        }
        Self::deserialize(toml::Value::Table(table)).map_err(|e| ConfigError::Parse { origin: origin.to_string(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check<E: std::fmt::Display>(key: &str, r: Result<(), E>) -> Result<(), ConfigError> {
            r.map_err(|e| ConfigError::Invalid { key: key.to_string(), message: e.to_string() })
        }
        let invalid = |key: &str, message: &str| Err(ConfigError::Invalid { key: key.into(), message: message.into() });
        if self.workers == 0 {
            return invalid("workers", "must be at least 1");
        }
        if self.data.kinds.is_empty() {
            return invalid("data.kinds", "needs at least one scenario kind");
        }
        if self.data.train_clips == 0 || self.data.eval_clips == 0 {
            return invalid("data", "train_clips and eval_clips must be positive");
        }
        if self.suite.seeds_per_clip == 0 {
            return invalid("suite.seeds_per_clip", "must be at least 1");
        }
        if let Some(p) = self.suite.planner {
            if p >= self.model.pool_size() {
                return invalid("suite.planner", &format!("{p} is outside the planner pool of {}", self.model.pool_size()));
            }
        }
        check("scenario", self.scenario.validate())?;
        check("tokenizer", self.tokenizer.validate())?;
        check("model", self.model.validate())?;
        check("pretrain", self.pretrain.validate())?;
        check("sft", self.sft.validate())?;
        check("rollout", self.rollout.validate())?;
        check("reward", self.reward.validate())?;
        check("rl", self.rl.validate())?;
        check("eval", self.eval.validate())?;
        if self.ablation.seeds == 0 {
            return invalid("ablation.seeds", "must be at least 1");
        }
        for (i, row) in self.ablation.rows.iter().enumerate() {
            check(&format!("ablation.rows[{i}]"), row.validate())?;
        }
        let names: std::collections::BTreeSet<&str> = self.ablation.rows.iter().map(|r| r.name.as_str()).collect();
        if names.len() != self.ablation.rows.len() {
            return invalid("ablation.rows", "row names must be unique");
        }
        if !self.ablation.rows.is_empty() && !names.contains(self.ablation.baseline.as_str()) {
            return invalid("ablation.baseline", &format!("no row named {:?}", self.ablation.baseline));
        }
        Ok(())
    }
}

/// Short names accepted in overrides and files.
const KEY_ALIASES: [(&str, &str); 1] = [("rollout.T", "rollout.horizon")];

fn canonical_key(key: &str) -> &str {
    KEY_ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, k)| k)
}

/// Values parse as TOML (numbers, booleans, arrays, quoted strings); anything
/// else is taken as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for (depth, p) in parts.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("`{}` is not a section", parts[..=depth].join(".")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests;
