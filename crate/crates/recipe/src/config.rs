//! Run configuration and the step-progression rules.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempora_core::data::{RenderConfig, Scheme};
use tempora_core::interface::{InterfaceConfig, InterfaceVariant};
use tempora_core::lm::{LmConfig, LmPreset};
use tempora_core::model::VlmConfig;
use tempora_core::moe::MoeConfig;
use tempora_core::optim::{AdamWConfig, LrSchedule};

use crate::tasks::Suite;
use crate::RecipeError;

/// Which frames of a clip the model sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FrameSampling {
    #[default]
    All,
    /// A seeded random subset of `frames` frames, kept at their original positions.
    Random { frames: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub suite: Suite,
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Clips used by the temporal-oriented training stage.
    pub temporal_clips: usize,
    pub render: RenderConfig,
    pub sampling: FrameSampling,
    /// Optional corpus files written by `gen-data`; generated on the fly otherwise.
    pub train_corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            suite: Suite::OrderCritical,
            train_clips: 400,
            eval_clips: 128,
            temporal_clips: 96,
            render: RenderConfig::default(),
            sampling: FrameSampling::All,
            train_corpus: None,
            eval_corpus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub temporal_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    /// Learning-rate schedule, restarted for each stage.
    pub schedule: LrSchedule,
    /// Steps of the auxiliary text pass behind `pretrained_init`.
    pub pretrain_steps: usize,
    /// Record the training loss every this many steps.
    pub log_every: usize,
    /// Longest generated answer during evaluation.
    pub max_answer_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temporal_steps: 2000,
            finetune_steps: 2500,
            batch_size: 8,
            max_grad_norm: Some(1.0),
            schedule: LrSchedule::Constant,
            pretrain_steps: 150,
            log_every: 10,
            max_answer_tokens: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecipeConfig {
    pub name: String,
    /// Recipe step 0..=4; each step unlocks one component family.
    pub step: u8,
    pub interface: InterfaceConfig,
    pub bank_capacity: Option<usize>,
    pub moe: Option<MoeConfig>,
    pub schemes: Vec<Scheme>,
    pub lm_preset: LmPreset,
    pub seeds: Vec<u64>,
    pub optimizer: AdamWConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            step: 0,
            interface: InterfaceConfig::linear(),
            bank_capacity: None,
            moe: None,
            schemes: Vec::new(),
            lm_preset: LmPreset::Small,
            seeds: vec![0],
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RecipeConfig {
    pub fn from_toml(text: &str) -> Result<Self, RecipeError> {
        toml::from_str(text).map_err(|e| RecipeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RecipeError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; keys are dotted paths and values TOML.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, RecipeError> {
        let mut root = toml::Table::try_from(self).map_err(|e| RecipeError::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| RecipeError::Config(format!("override `{ov}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let text = toml::to_string(&root).map_err(|e| RecipeError::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn vlm_config(&self) -> VlmConfig {
        VlmConfig {
            interface: self.interface.clone(),
            lm: LmConfig::preset(self.lm_preset),
            visual_dim: self.data.render.visual_dim,
            bank_capacity: self.bank_capacity,
            moe: self.moe,
        }
    }

    /// Enforces the step progression and component validity.
    pub fn validate(&self) -> Result<(), RecipeError> {
        let step = self.step;
        let bad = |m: String| Err(RecipeError::Invariant(m));
        if step > 4 {
            return bad(format!("step must be in 0..=4, got {step}"));
        }
        if step == 0 && (self.interface.variant != InterfaceVariant::Linear || self.interface.pretrained_init) {
            return bad("step 0 uses the plain linear interface".into());
        }
        if step < 2 && !self.schemes.is_empty() {
            return bad(format!("temporal schemes need step >= 2 (step is {step})"));
        }
        if step >= 2 && self.schemes.is_empty() {
            return bad(format!("step {step} needs at least one temporal scheme"));
        }
        if step < 3 && self.bank_capacity.is_some() {
            return bad(format!("the memory bank needs step >= 3 (step is {step})"));
        }
        if step < 4 && self.moe.is_some() {
            return bad(format!("mixture of experts needs step 4 (step is {step})"));
        }
        let mut s = self.schemes.clone();
        s.sort();
        s.dedup();
        if s.len() != self.schemes.len() {
            return bad("duplicate temporal schemes".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.train.batch_size == 0 || self.train.log_every == 0 {
            return bad("batch_size and log_every must be positive".into());
        }
        if let FrameSampling::Random { frames } = self.data.sampling {
            if frames == 0 {
                return bad("random sampling needs at least one frame".into());
            }
        }
        if self.data.train_clips == 0 || self.data.eval_clips == 0 {
            return bad("train and eval corpora must be non-empty".into());
        }
        self.vlm_config()
            .validate()
            .map_err(|e| RecipeError::Invariant(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), RecipeError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| RecipeError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    let last = parts[parts.len() - 1];
    if value.as_str() == Some("none") {
        table.remove(last);
    } else {
        table.insert(last.to_string(), value);
    }
    Ok(())
}
