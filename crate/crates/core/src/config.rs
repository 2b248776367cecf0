//! Run configuration: one TOML document shared by every subcommand, with
//! `section.key=value` overrides applied before parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline1Params, Baseline2Params};
use crate::evaluate::{EvalConfig, PhiEval};
use crate::models::GnnHyperparams;
use crate::simulator::{NoiseModel, SimulatorConfig};
use crate::trainer::{TrainConfig, TrainError, TrainSetup};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}", path.display())]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override {0:?}: expected section.key=value")]
    Override(String),
    #[error(transparent)]
    Invalid(#[from] TrainError),
}

/// Settings of the `simulate` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_fields: usize,
    pub phi: PhiEval,
    /// Substream label; training draws from "train", evaluation from "eval".
    pub label: String,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_fields: 10,
            phi: PhiEval::Prior,
            label: "sim".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub simulator: SimulatorConfig,
    pub noise: NoiseModel,
    pub model: GnnHyperparams,
    pub train: TrainConfig,
    pub evaluate: EvalConfig,
    /// Fixed baseline parameters; GA-tuned when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline1: Option<Baseline1Params>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline2: Option<Baseline2Params>,
}

impl RunConfig {
    /// Fields of 100–300 galaxies, H = 1000 minutes, a network small enough
    /// to converge within a few thousand single-core steps, and four fields
    /// per step to tame the variance of the φ term.
    pub fn desk() -> Self {
        let mut cfg = Self {
            simulator: SimulatorConfig::desk(),
            ..Self::default()
        };
        cfg.model.n_v = 16;
        cfg.model.n_e = 16;
        cfg.model.n_u = 16;
        cfg.model.hidden_width = 32;
        cfg.train.budget = 1000.0;
        cfg.train.steps = 6000;
        cfg.train.batch_size = 4;
        cfg.train.optimizer.learning_rate = 3e-4;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::with_overrides(Some(text), &[])
    }

    /// Parses `text` (or the defaults when `None`) after applying
    /// `section.key=value` overrides. Values use TOML syntax; anything that
    /// does not parse as TOML is taken as a string.
    pub fn with_overrides(text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let parse = |e: toml::de::Error| ConfigError::Parse(e.to_string());
        let mut root: toml::Table = match text {
            Some(t) => t.parse().map_err(parse)?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::Override(o.clone()));
            }
            let value = parse_value(value.trim());
            let mut table = &mut root;
            for p in &path[..path.len() - 1] {
                let entry = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(o.clone()))?;
            }
            table.insert(path[path.len() - 1].to_string(), value);
        }
        let cfg: Self = root.try_into().map_err(parse)?;
        cfg.train_setup().validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?),
            None => None,
        };
        Self::with_overrides(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            seed: self.seed,
            simulator: self.simulator.clone(),
            noise: self.noise.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides() {
        let text = "seed = 3\n[train]\nbudget = 500.0\n";
        let cfg = RunConfig::with_overrides(
            Some(text),
            &[
                "train.optimizer.learning_rate=1e-4".into(),
                "train.optimizer.kind=plain-gradient".into(),
                "evaluate.phi=prior".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.budget, 500.0);
        assert_eq!(cfg.train.optimizer.learning_rate, 1e-4);
        assert_eq!(cfg.train.optimizer.kind, crate::autodiff::OptimizerKind::PlainGradient);
        assert_eq!(cfg.evaluate.phi, PhiEval::Prior);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_toml("[train]\nbugdet = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbudget = -1.0\n").is_err());
        assert!(RunConfig::with_overrides(None, &["train.budget".into()]).is_err());
        assert!(RunConfig::with_overrides(None, &["seed.x=1".into()]).is_err());
        assert!(RunConfig::load(Some(Path::new("/nonexistent/c.toml")), &[]).is_err());
    }

    #[test]
    fn baseline_params_optional() {
        let cfg = RunConfig::from_toml("[baseline1]\nl_min = 2.5\n").unwrap();
        assert_eq!(cfg.baseline1.unwrap().l_min, 2.5);
        assert!(cfg.baseline2.is_none());
    }
}
