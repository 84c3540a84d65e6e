//! Experiment configuration: a flat JSON object with dotted keys, plus
//! `key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use kgac::amalgam::DistillConfig;
use kgac::datasets::{FeatureTransform, Preprocess};
use kgac::models::{Arch, ModelSpec};
use kgac::recipes::Recipe;
use kgac::trainer::{DecayMode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_student() -> String {
    "KAN".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Architecture for `train-teacher`.
    #[serde(default)]
    pub arch: Option<String>,
    /// Student architecture for `distill`.
    #[serde(default = "default_student")]
    pub student: String,
    /// Exactly two teacher architectures for `distill`.
    #[serde(default)]
    pub teachers: Vec<String>,
    /// Where teacher checkpoints are looked up (and written when missing).
    /// Defaults to `output`.
    #[serde(default)]
    pub teacher_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// A fixed split file used for every seed instead of per-seed splits.
    #[serde(default)]
    pub split: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,

    #[serde(rename = "data.largest_component", default = "yes")]
    pub largest_component: bool,
    /// Unset means each architecture's recipe decides.
    #[serde(rename = "data.features", default)]
    pub features: Option<FeatureTransform>,

    #[serde(rename = "train.lr", default)]
    pub lr: Option<f64>,
    #[serde(rename = "train.weight_decay", default)]
    pub weight_decay: Option<f64>,
    #[serde(rename = "train.decay_mode", default)]
    pub decay_mode: Option<DecayMode>,
    #[serde(rename = "train.max_epochs", default)]
    pub max_epochs: Option<usize>,
    #[serde(rename = "train.patience", default)]
    pub patience: Option<usize>,

    #[serde(rename = "distill.lambda", default)]
    pub lambda: Option<f64>,
    #[serde(rename = "distill.temperature", default)]
    pub temperature: Option<f64>,

    #[serde(rename = "model.hidden", default)]
    pub hidden: Option<usize>,
    #[serde(rename = "model.layers", default)]
    pub layers: Option<usize>,
    #[serde(rename = "model.heads", default)]
    pub heads: Option<usize>,
    #[serde(rename = "model.prop_steps", default)]
    pub prop_steps: Option<usize>,
    #[serde(rename = "model.teleport", default)]
    pub teleport: Option<f64>,
    #[serde(rename = "model.grid_size", default)]
    pub grid_size: Option<usize>,
    #[serde(rename = "model.spline_order", default)]
    pub spline_order: Option<usize>,
    #[serde(rename = "model.dropout", default)]
    pub dropout: Option<f64>,
}

/// Parses `key=value`. The value is read as JSON when possible and as a
/// plain string otherwise, so `arch=GCN` and `seeds=[0,1]` both work.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Config(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

impl ExperimentConfig {
    /// Reads `file` (if any), applies `overrides` in order and validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut map = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                match serde_json::from_str(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
                    Err(e) => return Err(CliError::Config(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            map.insert(k, v);
        }
        let config: ExperimentConfig = serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("`seeds` is empty".into()));
        }
        if let Some(a) = &self.arch {
            parse_arch(a)?;
        }
        parse_arch(&self.student)?;
        for t in &self.teachers {
            parse_arch(t)?;
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("`threads` must be at least 1".into()));
        }
        Ok(())
    }

    pub fn preprocess(&self, arch: Arch) -> Preprocess {
        let d = Recipe::for_arch(arch).preprocess;
        Preprocess { largest_component: self.largest_component, features: self.features.unwrap_or(d.features) }
    }

    /// Recipe for `arch` with the `train.*` overrides applied.
    pub fn train_config(&self, arch: Arch) -> Result<TrainConfig, CliError> {
        let d = Recipe::for_arch(arch).train;
        let c = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            decay_mode: self.decay_mode.unwrap_or(d.decay_mode),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            seeds: self.seeds.clone(),
        };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn distill_config(&self) -> Result<DistillConfig, CliError> {
        let d = DistillConfig::default();
        let c = DistillConfig { lambda: self.lambda.unwrap_or(d.lambda), temperature: self.temperature.unwrap_or(d.temperature) };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    /// Recipe spec for `arch` with the `model.*` overrides applied. Overrides
    /// are meant for the trained model only; teachers use their recipes.
    pub fn model_spec(&self, arch: Arch, seed: u64) -> Result<ModelSpec, CliError> {
        let d = Recipe::for_arch(arch).spec(seed);
        let spec = ModelSpec {
            hidden: self.hidden.unwrap_or(d.hidden),
            layers: self.layers.unwrap_or(d.layers),
            heads: self.heads.unwrap_or(d.heads),
            prop_steps: self.prop_steps.unwrap_or(d.prop_steps),
            teleport: self.teleport.unwrap_or(d.teleport),
            grid_size: self.grid_size.unwrap_or(d.grid_size),
            spline_order: self.spline_order.unwrap_or(d.spline_order),
            dropout: self.dropout.unwrap_or(d.dropout),
            ..d
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn teacher_dir(&self) -> &Path {
        self.teacher_dir.as_deref().unwrap_or(&self.output)
    }
}

pub fn parse_arch(name: &str) -> Result<Arch, CliError> {
    name.parse::<Arch>().map_err(|e| CliError::Config(e.to_string()))
}
