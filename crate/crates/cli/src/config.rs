//! One JSON schema shared by every command, with dotted-key overrides.

use std::path::Path;

use bas::eval::EvalConfig;
use bas::explore::Bins;
use bas::synth::DatasetSpec;
use bas::train::TrainConfig;
use bas::Execution;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    /// Inclusive range of morphology steps; negative erodes, positive dilates.
    pub n_min: i32,
    pub n_max: i32,
    pub bins: Bins,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            n_min: -4,
            n_max: 8,
            bins: Bins::default(),
        }
    }
}

impl ExploreConfig {
    pub fn ns(&self) -> Result<Vec<i32>, CliError> {
        if self.n_min > self.n_max {
            return Err(CliError::config(format!(
                "explore.n_min ({}) exceeds explore.n_max ({})",
                self.n_min, self.n_max
            )));
        }
        Ok((self.n_min..=self.n_max).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSearchConfig {
    /// Candidate thresholds are `{i / grid_steps}`.
    pub grid_steps: usize,
}

impl Default for ThresholdSearchConfig {
    fn default() -> Self {
        Self { grid_steps: 255 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Also train the legacy-activation variant.
    pub legacy: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { legacy: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub execution: Execution,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub explore: ExploreConfig,
    pub threshold_search: ThresholdSearchConfig,
    pub ablate: AblateConfig,
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub command: String,
    pub config_file: Option<String>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
    pub config: Config,
}

/// Loads `file` (or the defaults), applies `--seed` to the data and training
/// seeds, then applies `key=value` overrides in order.
pub fn resolve(file: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<Config, CliError> {
    let mut value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            let cfg: Config = serde_json::from_value(parsed)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::to_value(cfg).expect("config serializes")
        }
        None => serde_json::to_value(Config::default()).expect("config serializes"),
    };
    if let Some(s) = seed {
        value["data"]["seed"] = Value::from(s);
        value["train"]["seed"] = Value::from(s);
    }
    for o in overrides {
        let key = apply_override(&mut value, o)?;
        serde_json::from_value::<Config>(value.clone()).map_err(|e| CliError::config(format!("{key}: {e}")))?;
    }
    serde_json::from_value(value).map_err(|e| CliError::config(e.to_string()))
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
/// Returns the key.
pub fn apply_override<'a>(root: &mut Value, spec: &'a str) -> Result<&'a str, CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{spec}` is not key=value")))?;
    let mut node = &mut *root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::config(format!("{key}: unknown config key")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(key)
}
