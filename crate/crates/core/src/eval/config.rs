//! TOML run configuration with per-dataset profiles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::em::EmConfig;
use crate::gate::{Architecture, OptimizerKind, TrainConfig};
use crate::iavi::{IaviOptions, DEFAULT_SMOOTHING};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub mdp: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every knob of a run. All values are echoed into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Profile the values were derived from.
    pub profile: String,
    pub num_intentions: usize,
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub discount: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Sequences per gate update; 0 means the whole training set.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lambda_l1: f64,
    pub lambda_kl: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub patience: usize,
    /// Iterations during which the smoothness penalties apply; 0 keeps them
    /// on for the whole run.
    pub penalty_iters: usize,
    pub seed: u64,
    pub folds: usize,
    pub parallel_folds: bool,
    pub smoothing: f64,
    pub iavi_tol: f64,
    pub iavi_max_iters: usize,
    /// Fixed sweep count per M-step instead of full convergence.
    pub iavi_sweeps_per_mstep: Option<usize>,
    pub observation_lag: bool,
    /// Dirichlet pseudo-count for estimated transitions.
    pub prior_strength: f64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::labyrinth()
    }
}

pub const PROFILES: [&str; 3] = ["labyrinth", "bridge", "gridworld"];

impl RunConfig {
    pub fn labyrinth() -> Self {
        let iavi = IaviOptions::default();
        Self {
            profile: "labyrinth".into(),
            num_intentions: 3,
            architecture: Architecture::Rnn,
            embed_dim: 128,
            hidden_dim: 128,
            discount: 0.97,
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 0,
            optimizer: OptimizerKind::Sgd,
            lambda_l1: 2.22,
            lambda_kl: 1.48,
            max_iters: 180,
            rel_tol: 1e-5,
            patience: 5,
            penalty_iters: 0,
            seed: 42,
            folds: 5,
            parallel_folds: false,
            smoothing: DEFAULT_SMOOTHING,
            iavi_tol: iavi.tol,
            iavi_max_iters: iavi.max_iters,
            iavi_sweeps_per_mstep: None,
            observation_lag: false,
            prior_strength: 0.05,
            paths: Paths::default(),
        }
    }

    pub fn bridge() -> Self {
        Self {
            profile: "bridge".into(),
            num_intentions: 4,
            max_iters: 150,
            lambda_l1: 0.0,
            lambda_kl: 0.0,
            ..Self::labyrinth()
        }
    }

    /// Desk-scale settings for the 5×5 frustration gridworld.
    pub fn gridworld() -> Self {
        Self {
            profile: "gridworld".into(),
            num_intentions: 2,
            embed_dim: 16,
            hidden_dim: 16,
            learning_rate: 0.01,
            epochs: 1,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lambda_l1: 0.0,
            lambda_kl: 5.0,
            max_iters: 150,
            rel_tol: 1e-7,
            patience: 30,
            penalty_iters: 60,
            observation_lag: true,
            ..Self::labyrinth()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "labyrinth" => Ok(Self::labyrinth()),
            "bridge" => Ok(Self::bridge()),
            "gridworld" => Ok(Self::gridworld()),
            other => Err(Error::InvalidConfig(format!(
                "unknown profile {other:?} (expected one of {PROFILES:?})"
            ))),
        }
    }

    /// Parses TOML. When a `profile` key is present its values are the
    /// defaults; otherwise the labyrinth profile is. Unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let base = match table.get("profile") {
            Some(toml::Value::String(p)) => Self::profile(p)?,
            Some(_) => return Err(Error::InvalidConfig("profile must be a string".into())),
            None => Self::labyrinth(),
        };
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (k, v) in table {
            match (merged.get_mut(&k), v) {
                (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => dst.extend(src),
                (_, v) => {
                    merged.insert(k, v);
                }
            }
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidConfig(format!(
                "discount must be in [0, 1), got {}",
                self.discount
            )));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("folds must be at least 2".into()));
        }
        if !(self.prior_strength >= 0.0) {
            return Err(Error::InvalidConfig("prior_strength must be non-negative".into()));
        }
        if !(self.iavi_tol > 0.0) || self.iavi_max_iters == 0 {
            return Err(Error::InvalidConfig(
                "iavi_tol must be positive and iavi_max_iters at least 1".into(),
            ));
        }
        self.em_config().validate()
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            num_intentions: self.num_intentions,
            architecture: self.architecture,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            train: TrainConfig {
                learning_rate: self.learning_rate,
                epochs: self.epochs,
                batch_size: self.batch_size,
                lambda_l1: self.lambda_l1,
                lambda_kl: self.lambda_kl,
                optimizer: self.optimizer,
            },
            smoothing: self.smoothing,
            iavi: IaviOptions {
                tol: self.iavi_tol,
                max_iters: self.iavi_max_iters,
                damping: 1.0,
                sweep_budget: self.iavi_sweeps_per_mstep,
            },
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            patience: self.patience,
            penalty_iters: self.penalty_iters,
            observation_lag: self.observation_lag,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labyrinth_defaults() {
        let c = RunConfig::labyrinth();
        assert_eq!(c.num_intentions, 3);
        assert_eq!((c.embed_dim, c.hidden_dim), (128, 128));
        assert_eq!(c.discount, 0.97);
        assert_eq!(c.max_iters, 180);
        assert_eq!(c.seed, 42);
        assert_eq!((c.lambda_l1, c.lambda_kl), (2.22, 1.48));
        let b = RunConfig::bridge();
        assert_eq!((b.num_intentions, b.max_iters), (4, 150));
        assert_eq!((b.lambda_l1, b.lambda_kl), (0.0, 0.0));
    }

    #[test]
    fn toml_round_trip_and_profile_overrides() {
        let c = RunConfig::from_toml_str("profile = \"bridge\"\nseed = 7\n[paths]\nout = \"runs/a\"\n")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.num_intentions, 4);
        assert_eq!(c.paths.out.as_deref(), Some(Path::new("runs/a")));
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn penalties_are_echoed() {
        let c = RunConfig::from_toml_str("lambda_l1 = 2.22\nlambda_kl = 1.48\n").unwrap();
        let text = c.to_toml_string().unwrap();
        assert!(text.contains("lambda_l1 = 2.22"));
        assert!(text.contains("lambda_kl = 1.48"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml_str("learnign_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml_str("[paths]\nmpd = \"x\"\n").is_err());
        assert!(RunConfig::from_toml_str("discount = 1.0\n").is_err());
        assert!(RunConfig::from_toml_str("profile = \"atari\"\n").is_err());
        assert!(RunConfig::from_toml_str("folds = 1\n").is_err());
    }
}
