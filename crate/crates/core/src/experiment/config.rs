use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SyntheticBlobConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelOptions};
use crate::training::{KdKind, TrainOptions, TrainSchedule, LAMBDA_DIV, MIXUP_ALPHA};

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticBlobConfig),
    Cifar100 { train: PathBuf, test: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticBlobConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_steps: usize,
    pub class_order_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_steps: 5,
            class_order_seed: 1993,
        }
    }
}

/// Independent switches for every mechanism under study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub mixup: bool,
    pub kd: bool,
    pub divergence: bool,
    pub independent_heads: bool,
    pub token_expansion: bool,
    pub finetune: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            mixup: false,
            kd: true,
            divergence: true,
            independent_heads: true,
            token_expansion: true,
            finetune: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub scenario: ScenarioConfig,
    /// Total rehearsal budget; 0 disables rehearsal.
    pub memory_size: usize,
    pub toggles: Toggles,
    pub lambda_div: f64,
    pub mixup_alpha: f64,
    pub kd_kind: KdKind,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            scenario: ScenarioConfig::default(),
            memory_size: 2000,
            toggles: Toggles::default(),
            lambda_div: LAMBDA_DIV,
            mixup_alpha: MIXUP_ALPHA,
            kd_kind: KdKind::default(),
            eval_batch_size: 256,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate("model")?;
        self.schedule.validate("schedule")?;
        if !(self.lambda_div >= 0.0 && self.lambda_div.is_finite()) {
            return Err(Error::config("lambda_div", "must be finite and non-negative"));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::config("mixup_alpha", "must be finite and positive"));
        }
        if let KdKind::SoftmaxTemperature { centi_temperature: 0 } = self.kd_kind {
            return Err(Error::config("kd_kind.centi_temperature", "must be positive"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size", "must be at least 1"));
        }
        if self.scenario.num_steps == 0 {
            return Err(Error::config("scenario.num_steps", "must be at least 1"));
        }
        let (classes, size, channels) = match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                s.validate("dataset")?;
                (s.num_classes, s.image_size, s.channels)
            }
            DatasetSpec::Cifar100 { .. } => (100, 32, 3),
        };
        if classes % self.scenario.num_steps != 0 {
            return Err(Error::config(
                "scenario.num_steps",
                format!("{} does not divide the {classes} dataset classes", self.scenario.num_steps),
            ));
        }
        if size != self.model.image_size {
            return Err(Error::config(
                "model.image_size",
                format!("{} differs from dataset image size {size}", self.model.image_size),
            ));
        }
        if channels != self.model.channels {
            return Err(Error::config(
                "model.channels",
                format!("{} differs from dataset channels {channels}", self.model.channels),
            ));
        }
        Ok(())
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            token_expansion: self.toggles.token_expansion,
            independent_heads: self.toggles.independent_heads,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            mixup: self.toggles.mixup,
            mixup_alpha: self.mixup_alpha,
            kd: self.toggles.kd,
            kd_kind: self.kd_kind,
            divergence: self.toggles.divergence,
            lambda_div: self.lambda_div,
            finetune: self.toggles.finetune,
            freeze_shared: false,
        }
    }

    /// Schedule with the global seed applied.
    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seed,
            ..self.schedule.clone()
        }
    }
}

/// Parses and validates a JSON config, reporting the offending key path.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text)?;
    config_from_value(value)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

pub fn config_from_value(value: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { String::new() } else { key }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets a dotted key in a JSON object tree. The value is read as JSON when
/// it parses and as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not inside an object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::config(key, "parent is not an object"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
