//! Windowed-attention denoising network with input and attention masking.

pub mod config;
pub mod mask;
pub mod swin;
pub mod window;

pub use config::{MaskPolicy, ModelConfig, PolicyMode, TokenMode};
pub use mask::{apply_input_mask, sample_mask, sample_ratio};
pub use swin::{Forward, MaskedSwin, TrainMasks};
pub use window::{merge_index, partition_index, window_merge, window_partition};
