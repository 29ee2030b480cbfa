use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{ImageBatch, ImageTensor};
use crate::noise::NoiseSpec;
use crate::scalar::Scalar;

/// Training images, all at least `crop × crop`.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    names: Vec<String>,
    images: Vec<ImageTensor<T>>,
    crop: usize,
}

/// Where one patch was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSite {
    pub image: usize,
    pub top: usize,
    pub left: usize,
}

/// Clean patches and their degraded copies.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    pub clean: ImageBatch<T>,
    pub noisy: ImageBatch<T>,
    pub sites: Vec<CropSite>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(named: Vec<(String, ImageTensor<T>)>, crop: usize) -> Result<Self> {
        if named.is_empty() {
            return Err(Error::Dataset("no training images".into()));
        }
        for (name, img) in &named {
            if img.height() < crop || img.width() < crop {
                return Err(Error::Dataset(format!(
                    "{name} is {}x{}, smaller than the {crop}x{crop} crop",
                    img.height(),
                    img.width()
                )));
            }
        }
        let (names, images) = named.into_iter().unzip();
        Ok(Dataset { names, images, crop })
    }

    pub fn from_images(images: Vec<ImageTensor<T>>, crop: usize) -> Result<Self> {
        Self::new(images.into_iter().enumerate().map(|(i, img)| (format!("image_{i}"), img)).collect(), crop)
    }

    /// Every PNG of `dir`, in file-name order.
    pub fn load_dir(dir: &Path, crop: usize) -> Result<Self> {
        Self::new(crate::io::load_dir(dir)?, crop)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn images(&self) -> &[ImageTensor<T>] {
        &self.images
    }

    /// Uniform image, then uniform top-left corner among all valid positions.
    pub fn sample_site<R: Rng + ?Sized>(&self, rng: &mut R) -> CropSite {
        let image = rng.random_range(0..self.images.len());
        let img = &self.images[image];
        let top = rng.random_range(0..=img.height() - self.crop);
        let left = rng.random_range(0..=img.width() - self.crop);
        CropSite { image, top, left }
    }

    /// `batch` random crops; each is degraded with its own draws, in sample order.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch: usize,
        noise: Option<&NoiseSpec>,
        rng: &mut R,
    ) -> Result<TrainBatch<T>> {
        let mut clean = Vec::with_capacity(batch);
        let mut noisy = Vec::with_capacity(batch);
        let mut sites = Vec::with_capacity(batch);
        for _ in 0..batch {
            let site = self.sample_site(rng);
            let patch = self.images[site.image].crop(site.top, site.left, self.crop, self.crop)?;
            let degraded = match noise {
                Some(n) => n.apply(&patch, rng)?,
                None => patch.clone(),
            };
            clean.push(patch);
            noisy.push(degraded);
            sites.push(site);
        }
        Ok(TrainBatch {
            clean: ImageBatch::from_images(&clean)?,
            noisy: ImageBatch::from_images(&noisy)?,
            sites,
        })
    }
}

/// Free-function form of [`Dataset::sample_batch`].
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(
    dataset: &Dataset<T>,
    batch: usize,
    noise: Option<&NoiseSpec>,
    rng: &mut R,
) -> Result<TrainBatch<T>> {
    dataset.sample_batch(batch, noise, rng)
}
