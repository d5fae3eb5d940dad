//! Training configuration.
//!
//! Configs are TOML. A file only needs the keys it changes; everything else
//! comes from the chosen base profile. Unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::memory::VarianceMode;

/// How completed tasks are remembered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MemoryStrategy {
    /// Per-prototype Gaussian statistics.
    #[default]
    Proto,
    /// Up to `K` raw training features per discovered class.
    Exemplar(usize),
}

impl fmt::Display for MemoryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryStrategy::Proto => f.write_str("proto"),
            MemoryStrategy::Exemplar(k) => write!(f, "exemplar:{k}"),
        }
    }
}

impl FromStr for MemoryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "proto" => Ok(MemoryStrategy::Proto),
            Some(("exemplar", k)) => k
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .map(MemoryStrategy::Exemplar)
                .ok_or_else(|| Error::Config(format!("bad exemplar count in {s:?}"))),
            _ => Err(Error::Config(format!(
                "unknown memory strategy {s:?} (expected `proto` or `exemplar:K`)"
            ))),
        }
    }
}

impl Serialize for MemoryStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MemoryStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where a new task's class centers start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CenterInit {
    /// k-means++ seeds among the task's projected training features.
    #[default]
    #[serde(rename = "kmeans++")]
    KmeansPp,
    /// Uniform random directions.
    #[serde(rename = "random")]
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Prototypes per task.
    pub pnum: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_old: f64,
    pub lambda_ga: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    /// `false` replaces the projector with the identity map.
    pub use_projector: bool,
    pub seed: u64,
    pub trainable_sigma: bool,
    pub variance_mode: VarianceMode,
    pub memory: MemoryStrategy,
    /// Replay sampling from memory during later tasks.
    pub replay: bool,
    pub sep_loss: bool,
    pub freeze_old_centers: bool,
    pub center_init: CenterInit,
    /// Per-epoch cosine decay of the learning rate.
    pub cosine_lr: bool,
    /// Evaluate every this many epochs inside a task (0 = session end only).
    pub eval_every: usize,
    /// Replay draws per old class per batch; 0 = `ceil(batch_size / classes seen)`.
    pub replay_per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pnum: 1000,
            epochs: 200,
            batch_size: 512,
            lr: 1e-3,
            lambda_old: 10.0,
            lambda_ga: 4.0,
            tau: 0.1,
            epsilon: 0.05,
            sinkhorn_iters: 3,
            hidden_dim: 768,
            proj_dim: 128,
            use_projector: true,
            seed: 0,
            trainable_sigma: true,
            variance_mode: VarianceMode::Diagonal,
            memory: MemoryStrategy::Proto,
            replay: true,
            sep_loss: true,
            freeze_old_centers: false,
            center_init: CenterInit::KmeansPp,
            cosine_lr: false,
            eval_every: 0,
            replay_per_class: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Full-scale hyperparameters.
    Paper,
    /// Small settings that train in seconds on synthetic streams.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile {s:?} (paper|desk)"))),
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn desk() -> Self {
        Self {
            pnum: 50,
            epochs: 50,
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive_int = [
            ("pnum", self.pnum),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("hidden_dim", self.hidden_dim),
            ("proj_dim", self.proj_dim),
        ];
        for (name, v) in positive_int {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let positive = [("lr", self.lr), ("tau", self.tau), ("epsilon", self.epsilon)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_old", self.lambda_old), ("lambda_ga", self.lambda_ga)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Parses `text` as overrides on top of `self`.
    pub fn with_overrides(&self, text: &str) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            if !base.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            base.insert(k, v);
        }
        let cfg: TrainConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML form, with every key spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replay draws per stored class for a batch when `classes_seen` classes
    /// exist (old and new).
    pub fn replay_size(&self, classes_seen: usize) -> usize {
        if self.replay_per_class > 0 {
            self.replay_per_class
        } else {
            self.batch_size.div_ceil(classes_seen.max(1)).max(1)
        }
    }
}
