//! Desk-scale comparison of training policies on procedural scenes.
//!
//! Each variant is trained from the same seed on the same images and noise,
//! then evaluated on a fixed held-out scene set under the training noise and
//! under a different noise family.

use serde::Serialize;

use crate::error::Result;
use crate::image::ImageTensor;
use crate::metrics::psnr;
use crate::model::{MaskPolicy, ModelConfig};
use crate::noise::{stream_rng, NoiseSpec};
use crate::scalar::Scalar;
use crate::scenes::render_set;
use crate::train::{Dataset, EvalRecord, TrainConfig, Trainer};

/// Scene family of the held-out set; disjoint from any training family used here.
const TEST_FAMILY: u64 = 0x7e57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No masks.
    Baseline,
    /// Input mask and attention mask.
    Masked,
    /// Input mask only.
    InputOnly,
}

impl Variant {
    pub fn policy(self) -> MaskPolicy {
        match self {
            Variant::Baseline => MaskPolicy::baseline(),
            Variant::Masked => MaskPolicy::masked(),
            Variant::InputOnly => MaskPolicy { attention_ratio: 0.0, ..MaskPolicy::masked() },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train_images: usize,
    pub train_size: usize,
    pub test_images: usize,
    pub test_size: usize,
    pub crop: usize,
    pub batch: usize,
    pub iters: u64,
    pub milestones: [u64; 2],
    pub train_noise: NoiseSpec,
    pub shifted_noise: NoiseSpec,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seed: 0,
            model: ModelConfig::default(),
            train_images: 16,
            train_size: 128,
            test_images: 8,
            test_size: 128,
            crop: 64,
            batch: 8,
            iters: 2000,
            milestones: [1000, 1500],
            train_noise: NoiseSpec::Gaussian { sigma255: 15.0 },
            shifted_noise: NoiseSpec::Speckle { var: 0.02 },
        }
    }
}

/// Clean held-out scenes with both degradations, identical for every variant.
pub struct TestSet<T> {
    pub clean: Vec<ImageTensor<T>>,
    pub in_dist: Vec<ImageTensor<T>>,
    pub shifted: Vec<ImageTensor<T>>,
}

impl<T: Scalar> TestSet<T> {
    pub fn new(cfg: &StudyConfig) -> Result<Self> {
        let clean = render_set(TEST_FAMILY, cfg.test_images, cfg.test_size, cfg.test_size);
        let degrade = |spec: &NoiseSpec, stream: u64| -> Result<Vec<ImageTensor<T>>> {
            let mut rng = stream_rng(TEST_FAMILY, stream);
            clean.iter().map(|img| spec.apply(img, &mut rng)).collect()
        };
        let in_dist = degrade(&cfg.train_noise, 1)?;
        let shifted = degrade(&cfg.shifted_noise, 2)?;
        Ok(TestSet { clean, in_dist, shifted })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub seed: u64,
    /// Mean PSNR on the training noise.
    pub psnr_in: f64,
    /// Mean PSNR on the shifted noise.
    pub psnr_shifted: f64,
    /// Mean over images of `|mean(output) - mean(clean)|`, on the training noise.
    pub mean_shift: f64,
    /// Test-set mean intensity of the outputs minus that of the clean images
    /// (all test images share one size), on the training noise.
    pub mean_bias: f64,
    pub first_loss: f64,
    pub last_loss: f64,
}

impl VariantReport {
    pub fn psnr_drop(&self) -> f64 {
        self.psnr_in - self.psnr_shifted
    }
}

fn train_config(cfg: &StudyConfig, variant: Variant) -> TrainConfig {
    TrainConfig {
        crop: cfg.crop,
        batch: cfg.batch,
        total_iters: cfg.iters,
        milestones: cfg.milestones,
        noise: Some(cfg.train_noise),
        policy: variant.policy(),
        model: cfg.model,
        seed: cfg.seed,
        checkpoint_every: 0,
        eval_every: (cfg.iters / 20).max(1),
        ..TrainConfig::default()
    }
}

/// Train one variant in memory and score it on `tests`.
pub fn run_variant<T: Scalar>(cfg: &StudyConfig, variant: Variant, tests: &TestSet<T>) -> Result<VariantReport> {
    let tc = train_config(cfg, variant);
    let images = render_set(cfg.seed, cfg.train_images, cfg.train_size, cfg.train_size);
    let mut trainer = Trainer::new(tc, Dataset::from_images(images, cfg.crop)?)?;
    trainer.run_to(cfg.iters, |_, _| Ok(()))?;
    let history: &[EvalRecord] = trainer.history();
    let model = trainer.model();

    let mut psnr_in = 0.0;
    let mut psnr_shifted = 0.0;
    let mut mean_shift = 0.0;
    let mut mean_bias = 0.0;
    for ((clean, a), b) in tests.clean.iter().zip(&tests.in_dist).zip(&tests.shifted) {
        let out = model.denoise(a)?;
        psnr_in += psnr(clean, &out)?;
        psnr_shifted += psnr(clean, &model.denoise(b)?)?;
        let d = out.mean() - clean.mean();
        mean_shift += d.abs();
        mean_bias += d;
    }
    let n = tests.clean.len() as f64;
    Ok(VariantReport {
        variant,
        seed: cfg.seed,
        psnr_in: psnr_in / n,
        psnr_shifted: psnr_shifted / n,
        mean_shift: mean_shift / n,
        mean_bias: mean_bias / n,
        first_loss: history.first().map_or(f64::NAN, |r| r.loss),
        last_loss: history.last().map_or(f64::NAN, |r| r.loss),
    })
}
