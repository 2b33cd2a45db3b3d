//! Run configuration: one file of dotted keys (`pairing.delta = 0.6`), one
//! root seed, and a flat echo of the resolved values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::AgreementConfig;
use crate::clustering::ClusteringConfig;
use crate::grpo::GrpoConfig;
use crate::pairing::PairingConfig;
use crate::rewards::ScorerRegistry;
use crate::seeds::derive_seed;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Mini-batch k-means settings. The cluster count comes from `pairing.k`
/// and the seed from the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringOptions {
    pub batch_size: usize,
    pub max_iters: usize,
    pub convergence_tol: f64,
}

impl Default for ClusteringOptions {
    fn default() -> Self {
        let d = ClusteringConfig::default();
        Self {
            batch_size: d.batch_size,
            max_iters: d.max_iters,
            convergence_tol: d.convergence_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenRewardConfig {
    pub scorer: String,
}

impl Default for GenRewardConfig {
    fn default() -> Self {
        Self {
            scorer: crate::rewards::TargetOverlap::ID.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub gen: GenRewardConfig,
}

/// Learning rate used by the toy runs unless the config overrides it.
pub const TOY_LR: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub out_dir: PathBuf,
    pub pairing: PairingConfig,
    pub clustering: ClusteringOptions,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub agreement: AgreementConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 200,
            out_dir: PathBuf::from("out"),
            pairing: PairingConfig::default(),
            clustering: ClusteringOptions::default(),
            grpo: GrpoConfig {
                lr: TOY_LR,
                ..GrpoConfig::default()
            },
            reward: RewardConfig::default(),
            train: TrainConfig::default(),
            agreement: AgreementConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.steps == 0 {
            return Err(ConfigError::Invalid("steps must be at least 1".into()));
        }
        self.pairing.validate().map_err(|e| invalid(&e))?;
        self.clustering_config()
            .validate()
            .map_err(|e| invalid(&e))?;
        self.grpo.validate().map_err(|e| invalid(&e))?;
        ScorerRegistry::with_builtins()
            .get(&self.reward.gen.scorer)
            .map_err(|e| invalid(&e))?;
        self.train.validate().map_err(ConfigError::Invalid)?;
        let a = &self.agreement;
        if a.steps == 0 || a.num_pairs == 0 || a.num_prompts == 0 || a.vocab_size == 0 {
            return Err(ConfigError::Invalid(
                "agreement sizes must be at least 1".into(),
            ));
        }
        for (name, r) in [
            ("retrieved_sim", a.retrieved_sim),
            ("unpaired_sim", a.unpaired_sim),
        ] {
            if !(0.0..=1.0).contains(&r[0]) || !(r[0]..=1.0).contains(&r[1]) {
                return Err(ConfigError::Invalid(format!(
                    "agreement.{name} must be an ordered range inside [0, 1]"
                )));
            }
        }
        let s = &self.synth;
        if s.concepts == 0 || s.dim == 0 || !(s.noise[0] >= 0.0 && s.noise[1] >= s.noise[0]) {
            return Err(ConfigError::Invalid(
                "synth sizes or noise range invalid".into(),
            ));
        }
        Ok(())
    }

    /// Clustering settings with `k` left at its default; the pipeline
    /// replaces it with `pairing.k` or the size-based default.
    pub fn clustering_config(&self) -> ClusteringConfig {
        ClusteringConfig {
            batch_size: self.clustering.batch_size,
            max_iters: self.clustering.max_iters,
            convergence_tol: self.clustering.convergence_tol,
            seed: self.subsystem_seed("clustering"),
            ..ClusteringConfig::default()
        }
    }

    pub fn subsystem_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    /// Every resolved value as sorted `dotted.key = value` lines. The echo
    /// parses back into an identical config.
    pub fn echo(&self) -> String {
        let value = toml::Value::try_from(self).expect("config is serializable");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
