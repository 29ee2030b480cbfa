use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskPolicy, ModelConfig};
use crate::noise::NoiseSpec;
use crate::tensor::AdamConfig;

/// Everything that determines a training run.
///
/// `noise: null` in JSON trains on clean inputs; omitting the key keeps the
/// default Gaussian σ255 = 15.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    pub crop: usize,
    pub batch: usize,
    pub total_iters: u64,
    pub milestones: [u64; 2],
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub noise: Option<NoiseSpec>,
    pub policy: MaskPolicy,
    pub model: ModelConfig,
    pub seed: u64,
    /// Save a checkpoint after every `checkpoint_every` iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Length of the interval over which loss and PSNR are averaged in the manifest.
    pub eval_every: u64,
    /// Start from these weights with a fresh optimizer.
    pub init_from: Option<PathBuf>,
    /// Directory receiving checkpoints and the manifest.
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_dir: PathBuf::from("data/train"),
            crop: 64,
            batch: 8,
            total_iters: 2000,
            milestones: [1000, 1500],
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            noise: Some(NoiseSpec::Gaussian { sigma255: 15.0 }),
            policy: MaskPolicy::masked(),
            model: ModelConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            eval_every: 100,
            init_from: None,
            out_dir: PathBuf::from("runs/train"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [m1, m2] = self.milestones;
        if !(m1 < m2 && m2 < self.total_iters) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing and below total_iters ({}), got [{m1}, {m2}]",
                self.total_iters
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.crop == 0 {
            return Err(Error::Config("crop must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Config(format!("lr0 must be finite and non-negative, got {}", self.lr0)));
        }
        let beta = |b: f64| (0.0..1.0).contains(&b);
        if !(beta(self.beta1) && beta(self.beta2)) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.policy.is_inference() {
            return Err(Error::Config("policy.mode must be train for a training run".into()));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        self.policy.validate()?;
        self.model.validate()
    }

    /// Parse JSON, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{e} (line {}, column {})", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    /// Learning rate for zero-based iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        lr_at(iter, self)
    }
}

/// Step schedule: `lr0` before the first milestone, halved from it, quartered from the second.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let [m1, m2] = cfg.milestones;
    if iter < m1 {
        cfg.lr0
    } else if iter < m2 {
        cfg.lr0 / 2.0
    } else {
        cfg.lr0 / 4.0
    }
}
