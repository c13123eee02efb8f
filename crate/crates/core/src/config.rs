//! Run configuration, read from TOML and written back fully resolved.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ShapeWorldConfig;
use crate::detector::{ModelConfig, OptimConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_steps: u64,
    pub finetune_steps: u64,
    /// Support classes per episode (`C`).
    pub episode_classes: usize,
    /// Support examples per class within an episode.
    pub episode_shots: usize,
    /// `K` of the fine-tuning support set.
    pub k_shot: usize,
    pub support_seed: u64,
    /// Subsample base classes to `K` as well during fine-tuning.
    pub balanced_base: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_steps: 15_000,
            finetune_steps: 2_000,
            episode_classes: 5,
            episode_shots: 1,
            k_shot: 5,
            support_seed: 0,
            balanced_base: true,
            log_every: 50,
            checkpoint_every: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub support_seeds: Vec<u64>,
    /// Minimum score kept when collecting detections for AP.
    pub score_threshold: f64,
    pub iou_threshold: f64,
    /// Class-name pairs for confusion tables.
    pub confusion_pairs: Vec<(String, String)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            support_seeds: (0..10).collect(),
            score_threshold: 0.01,
            iou_threshold: 0.5,
            confusion_pairs: vec![("ring-filled".into(), "circle-filled".into())],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub data: ShapeWorldConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/shapes"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            data: ShapeWorldConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Parses `text` and applies `key.path=value` overrides on top. Values
    /// are read as TOML, falling back to a bare string.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let leaf = parts
                .pop()
                .filter(|k| !k.is_empty())
                .ok_or_else(|| Error::Config(format!("empty key in {o:?}")))?;
            let mut table = &mut root;
            for p in parts {
                table = table
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{p} is not a table")))?;
            }
            table.insert(leaf.to_string(), value);
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        let t = &self.train;
        if t.episode_classes == 0 {
            return Err(Error::Config("episode_classes (C) must be at least 1".into()));
        }
        if t.episode_classes > self.model.max_classes {
            return Err(Error::Config(format!(
                "episode_classes {} exceeds model.max_classes {}",
                t.episode_classes, self.model.max_classes
            )));
        }
        if self.model.aggregation == crate::cam::Aggregation::Reweight && t.episode_classes != 1 {
            return Err(Error::Config(
                "reweight aggregation requires episode_classes = 1".into(),
            ));
        }
        if t.episode_shots == 0 || t.k_shot == 0 {
            return Err(Error::Config("episode_shots and k_shot must be positive".into()));
        }
        if self.optim.batch_episodes == 0 {
            return Err(Error::Config("optim.batch_episodes must be positive".into()));
        }
        Ok(())
    }

    /// Writes `config.resolved` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.resolved");
        fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
