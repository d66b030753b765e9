//! Run configuration: one JSON document holding every knob, with
//! `key.path=value` overrides applied before parsing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alignment::PoolingMode;
use crate::error::{Error, Result};
use crate::model::ModelSettings;
use crate::objectives::ObjectiveConfig;
use crate::synth::SynthConfig;
use crate::training::{SgdConfig, TrainOptions};

/// Settings for the finite-difference check of the configured model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Fresh seeds to try when a hinge or a pooling decision sits within
    /// `2·epsilon` of its switching point.
    pub max_reseeds: usize,
    /// Size of the probe example.
    pub vocab_size: usize,
    pub num_steps: usize,
    pub tokens_per_step: usize,
    pub feature_dim: usize,
    /// Width of every layer of the probe model.
    pub model_dim: usize,
    /// Larger than the training default so that no weight's gradient is
    /// small enough to drown in rounding noise.
    pub init_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            tolerance: 1e-4,
            max_reseeds: 10,
            vocab_size: 24,
            num_steps: 4,
            tokens_per_step: 2,
            feature_dim: 8,
            model_dim: 4,
            init_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The only source of randomness: weight init, shuffling, wrong
    /// candidate draws and synthetic generation all derive from it.
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub model: ModelSettings,
    pub objective: ObjectiveConfig,
    pub sgd: SgdConfig,
    pub pooling: PoolingMode,
    /// Generator settings for `gen-synth`; its seed is `seed` above.
    pub synth: SynthConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_data: None,
            test_data: None,
            model: ModelSettings::default(),
            objective: ObjectiveConfig::default(),
            sgd: SgdConfig::default(),
            pooling: PoolingMode::Constrained,
            synth: SynthConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Sets `root[a][b]...` from `"a.b...=value"`. The value is read as JSON
/// when it parses and as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = root;
    for part in parents {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is inside a non-object")))?;
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` targets a non-object")))?
        .insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or starts from the defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        RunConfig::from_value(value, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.sgd.validate()?;
        let gc = &self.gradcheck;
        if !(gc.epsilon > 0.0 && gc.tolerance > 0.0 && gc.init_scale > 0.0) {
            return Err(Error::Config(
                "gradcheck.epsilon, gradcheck.tolerance and gradcheck.init_scale must be > 0".into(),
            ));
        }
        if gc.model_dim == 0 {
            return Err(Error::Config("gradcheck.model_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            objective: self.objective.clone(),
            sgd: self.sgd.clone(),
            pooling: self.pooling,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }
}
