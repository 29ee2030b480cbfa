//! Masked training for windowed-attention image denoising.

pub mod checkpoint;
pub mod cka;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod runtime;
pub mod scalar;
pub mod scenes;
pub mod study;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{ImageBatch, ImageTensor};
pub use model::{MaskPolicy, MaskedSwin, ModelConfig, PolicyMode, TokenMode};
pub use noise::NoiseSpec;
pub use scalar::{DType, Scalar};
pub use tensor::{Tensor, TensorError};

/// Working precision for training and inference.
pub type Real = f32;
/// Precision used by gradient checks and reference computations.
pub type Real64 = f64;

pub type Image = ImageTensor<Real>;
pub type Image64 = ImageTensor<Real64>;
pub type Model = MaskedSwin<Real>;
pub type Model64 = MaskedSwin<Real64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
