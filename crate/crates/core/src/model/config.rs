use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the denoising network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width `C`.
    pub channels: usize,
    /// Window side `M`; attention runs over `M²` tokens.
    pub window: usize,
    pub heads: usize,
    /// Number of attention blocks.
    pub depth: usize,
    pub mlp_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { channels: 32, window: 8, heads: 4, depth: 4, mlp_ratio: 2.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window == 0 || self.heads == 0 || self.depth == 0 {
            return Err(Error::Config("channels, window, heads and depth must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        Ok(())
    }

    /// Per-head dimension `D = C / h`.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn hidden(&self) -> usize {
        (self.mlp_ratio * self.channels as f64).round() as usize
    }

    /// Cyclic shift used by block `index`: every second block shifts by `⌊M/2⌋`
    /// when the grid holds more than one window in each direction.
    pub fn shift_for(&self, index: usize, height: usize, width: usize) -> usize {
        if index % 2 == 1 && height.min(width) > self.window {
            self.window / 2
        } else {
            0
        }
    }
}

/// How mask tokens are treated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    #[default]
    FixedZero,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    #[default]
    Train,
    Inference,
}

/// Input-mask and attention-mask settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    /// Per-sample input mask ratio is drawn uniformly from this range.
    pub input_ratio_range: [f64; 2],
    pub attention_ratio: f64,
    #[serde(default)]
    pub token_mode: TokenMode,
    #[serde(default)]
    pub mode: PolicyMode,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::masked()
    }
}

impl MaskPolicy {
    /// Input ratio in `[0.75, 0.85]`, attention ratio `0.75`.
    pub fn masked() -> Self {
        MaskPolicy {
            input_ratio_range: [0.75, 0.85],
            attention_ratio: 0.75,
            token_mode: TokenMode::FixedZero,
            mode: PolicyMode::Train,
        }
    }

    /// Plain supervised training: no masks at all.
    pub fn baseline() -> Self {
        MaskPolicy { input_ratio_range: [0.0, 0.0], attention_ratio: 0.0, ..MaskPolicy::masked() }
    }

    pub fn inference() -> Self {
        MaskPolicy { mode: PolicyMode::Inference, ..MaskPolicy::baseline() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.input_ratio_range;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(lo) && unit(hi) && lo <= hi) {
            return Err(Error::Config(format!("input_ratio_range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        if !unit(self.attention_ratio) {
            return Err(Error::Config(format!("attention_ratio must be in [0, 1], got {}", self.attention_ratio)));
        }
        Ok(())
    }

    pub fn is_inference(&self) -> bool {
        self.mode == PolicyMode::Inference
    }

    /// True when training under this policy never touches a mask.
    pub fn is_unmasked(&self) -> bool {
        self.is_inference() || (self.input_ratio_range[1] == 0.0 && self.attention_ratio == 0.0)
    }
}
