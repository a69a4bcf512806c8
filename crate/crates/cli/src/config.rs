//! Experiment configuration: a single JSON file, with CLI flags
//! overriding individual fields.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cellprog_core::transition::ModelConfig;

use crate::AppError;

/// How cells are assigned to the train and test sets.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Even-numbered cells train, odd-numbered cells test.
    #[default]
    EvenOdd,
    Explicit {
        train: Vec<String>,
        test: Vec<String>,
    },
}


/// A model entry: either a preset name (`"model1"`..`"model6"`) or a full
/// inline configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig, AppError> {
        match self {
            ModelSpec::Preset(name) => ModelConfig::preset_by_name(name).ok_or_else(|| {
                AppError::config(format!(
                    "unknown preset '{name}' (expected model1..model6)"
                ))
            }),
            ModelSpec::Custom(config) => {
                config
                    .feature_spec
                    .validate()
                    .map_err(|e| AppError::config(format!("model '{}': {e}", config.name)))?;
                Ok(config.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub split: SplitRule,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, AppError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            AppError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| AppError::config(format!("invalid config {}: {e}", path.display())))
    }

    /// The configured models, defaulting to the six standard presets.
    pub fn resolved_models(&self) -> Result<Vec<ModelConfig>, AppError> {
        let configs = if self.models.is_empty() {
            ModelConfig::all_presets()
        } else {
            self.models
                .iter()
                .map(|m| m.resolve())
                .collect::<Result<Vec<_>, _>>()?
        };
        let mut names = BTreeSet::new();
        for c in &configs {
            if !names.insert(c.name.clone()) {
                return Err(AppError::config(format!("duplicate model name '{}'", c.name)));
            }
        }
        Ok(configs)
    }

    pub fn validate_split(&self) -> Result<(), AppError> {
        if let SplitRule::Explicit { train, test } = &self.split {
            let train_set: BTreeSet<_> = train.iter().collect();
            let test_set: BTreeSet<_> = test.iter().collect();
            let overlap: Vec<_> = train_set.intersection(&test_set).collect();
            if !overlap.is_empty() {
                return Err(AppError::config(format!(
                    "split is not disjoint; cells in both sets: {overlap:?}"
                )));
            }
        }
        Ok(())
    }
}
