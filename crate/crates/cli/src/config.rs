use std::path::Path;

use rrm_core::bench::{ExperimentConfig, ExperimentId};
use rrm_core::dqn::DqnConfig;
use rrm_core::envgen::{GenConfig, Layout};
use rrm_core::nn::TrainConfig;
use rrm_core::optim::{NetworkConfig, SystemModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Environment variable that replaces the built-in default seed.
pub const SEED_ENV: &str = "RRM_SEED";
pub const DEFAULT_SEED: u64 = 1;

/// Pair-universe bounds and the non-stationarity factor of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    pub l_max: usize,
    pub m_max: usize,
    pub k: usize,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        Self { l_max: 32, m_max: 128, k: 10 }
    }
}

/// The config document every subcommand reads. Each section starts from its
/// defaults; a file only lists the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `None` falls back to `RRM_SEED`, then to 1.
    pub seed: Option<u64>,
    pub generator: GenConfig,
    pub subset: SubsetConfig,
    pub count: usize,
    pub train: TrainConfig,
    /// Power-violation weight; `None` uses the preset default.
    pub beta: Option<f64>,
    pub dqn: DqnConfig,
    /// Overlay on the desk defaults of the experiment `bench` runs.
    pub experiment: Value,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            generator: GenConfig::new(SystemModel::Sm1, NetworkConfig::new(1, 1, 32)),
            subset: SubsetConfig::default(),
            count: 5000,
            train: TrainConfig::default(),
            beta: None,
            dqn: ExperimentConfig::desk(ExperimentId::DqnCurves).dqn,
            experiment: Value::Object(Default::default()),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, when given. Keys the defaults do not
    /// have are rejected, except under `experiment`, which the experiment
    /// config validates itself.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut base = serde_json::to_value(Self::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
        merge_strict(&mut base, &file, "")?;
        serde_json::from_value(base).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Flag, then file, then `RRM_SEED`, then the built-in default.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }
}

/// Layout a model uses when none is given.
pub fn default_layout(model: SystemModel) -> Layout {
    match model {
        SystemModel::Sm1 | SystemModel::Sm2a => Layout::None,
        SystemModel::Sm2b => Layout::Paired,
        SystemModel::Sm3 => Layout::Nearest,
    }
}

fn merge_strict(base: &mut Value, overlay: &Value, path: &str) -> Result<(), CliError> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if key == "experiment" => merge_loose(slot, v),
                    Some(slot) => merge_strict(slot, v, &key)?,
                    None => return Err(CliError::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

fn merge_loose(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_loose(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn nested_keys_are_checked() {
        let mut base = serde_json::to_value(RunConfig::default()).unwrap();
        let err = merge_strict(&mut base, &json!({"train": {"epochs": 3}}), "").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        merge_strict(&mut base, &json!({"train": {"max_epochs": 3}, "experiment": {"anything": 1}}), "").unwrap();
        assert_eq!(base["train"]["max_epochs"], 3);
        assert_eq!(base["train"]["batch_size"], 32);
    }
}
