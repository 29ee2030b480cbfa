//! Synthetic degradations.
//!
//! Unit conventions follow MATLAB `imnoise`: `sigma255` parameters are on the
//! 0-255 scale, variance parameters on the `[0, 1]` scale. Every stage clips
//! its output to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::scalar::Scalar;

/// PRNG used for every random draw in the crate.
pub type SeededRng = ChaCha8Rng;

/// Identifier recorded in run manifests.
pub const RNG_ALGORITHM: &str = "rand_chacha::ChaCha8Rng";

/// Photon-count scale used to turn intensities into Poisson rates.
pub const POISSON_PEAK: f64 = 255.0;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A noise family with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian { sigma255: f64 },
    Speckle { var: f64 },
    Poisson { alpha: f64 },
    SpatiallyCorrelated { sigma255: f64 },
    SaltPepper { density: f64 },
    Mixture { level: u8 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be a finite non-negative number, got {v}")))
            }
        };
        match *self {
            NoiseSpec::Gaussian { sigma255 } | NoiseSpec::SpatiallyCorrelated { sigma255 } => nonneg("sigma255", sigma255),
            NoiseSpec::Speckle { var } => nonneg("var", var),
            NoiseSpec::Poisson { alpha } => nonneg("alpha", alpha),
            NoiseSpec::SaltPepper { density } => {
                nonneg("density", density)?;
                if density > 1.0 {
                    return Err(Error::Parameter(format!("density must be in [0, 1], got {density}")));
                }
                Ok(())
            }
            NoiseSpec::Mixture { level } => mixture_params(level).map(|_| ()),
        }
    }

    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, img: &ImageTensor<T>, rng: &mut R) -> Result<ImageTensor<T>> {
        self.validate()?;
        Ok(match *self {
            NoiseSpec::Gaussian { sigma255 } => add_gaussian(img, sigma255, rng),
            NoiseSpec::Speckle { var } => add_speckle(img, var, rng),
            NoiseSpec::Poisson { alpha } => add_poisson(img, alpha, rng),
            NoiseSpec::SpatiallyCorrelated { sigma255 } => add_spatially_correlated(img, sigma255, rng),
            NoiseSpec::SaltPepper { density } => add_salt_pepper(img, density, rng),
            NoiseSpec::Mixture { level } => add_mixture(img, level, rng)?,
        })
    }

    /// Short human-readable tag, e.g. `gaussian:15`.
    pub fn label(&self) -> String {
        match *self {
            NoiseSpec::Gaussian { sigma255 } => format!("gaussian:{sigma255}"),
            NoiseSpec::Speckle { var } => format!("speckle:{var}"),
            NoiseSpec::Poisson { alpha } => format!("poisson:{alpha}"),
            NoiseSpec::SpatiallyCorrelated { sigma255 } => format!("spatial:{sigma255}"),
            NoiseSpec::SaltPepper { density } => format!("saltpepper:{density}"),
            NoiseSpec::Mixture { level } => format!("mixture:{level}"),
        }
    }
}

#[inline]
fn clip<T: Scalar>(v: f64) -> T {
    T::of(v.clamp(0.0, 1.0))
}

/// Additive white Gaussian noise with standard deviation `sigma255 / 255`.
pub fn add_gaussian<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, sigma255: f64, rng: &mut R) -> ImageTensor<T> {
    add_gaussian_std(img, sigma255 / 255.0, rng)
}

fn add_gaussian_std<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, std: f64, rng: &mut R) -> ImageTensor<T> {
    if std == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = clip(v.as_f64() + normal.sample(rng));
    }
    out
}

/// Multiplicative noise `J = I + n·I` with `n` uniform, zero mean, variance `var`.
pub fn add_speckle<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, var: f64, rng: &mut R) -> ImageTensor<T> {
    if var == 0.0 {
        return img.clone();
    }
    let half_width = (3.0 * var).sqrt();
    let uniform = Uniform::new_inclusive(-half_width, half_width).expect("valid uniform bounds");
    let mut out = img.clone();
    for v in out.data_mut() {
        let i = v.as_f64();
        *v = clip(i + uniform.sample(rng) * i);
    }
    out
}

/// Shot noise `n = Poisson(I·P)/P - I`, scaled by `alpha`.
pub fn add_poisson<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, alpha: f64, rng: &mut R) -> ImageTensor<T> {
    if alpha == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let i = v.as_f64();
        let rate = i * POISSON_PEAK;
        let count = if rate > 0.0 {
            Poisson::new(rate).expect("positive finite rate").sample(rng)
        } else {
            0.0
        };
        let n = count / POISSON_PEAK - i;
        *v = clip(i + alpha * n);
    }
    out
}

/// White Gaussian field (std `sigma255 / 255`) smoothed with a 3×3 mean
/// filter under replicate borders, then added. The field is not rescaled
/// after filtering.
pub fn add_spatially_correlated<T: Scalar, R: Rng + ?Sized>(
    img: &ImageTensor<T>,
    sigma255: f64,
    rng: &mut R,
) -> ImageTensor<T> {
    if sigma255 == 0.0 {
        return img.clone();
    }
    let field = correlated_field(img.height(), img.width(), sigma255 / 255.0, rng);
    let mut out = img.clone();
    for (v, n) in out.data_mut().iter_mut().zip(&field) {
        *v = clip(v.as_f64() + n);
    }
    out
}

/// The filtered noise field alone, channel-interleaved like an image.
pub fn correlated_field<R: Rng + ?Sized>(height: usize, width: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    let white: Vec<f64> = (0..height * width * CHANNELS).map(|_| normal.sample(rng)).collect();
    let at = |y: isize, x: isize, c: usize| {
        let y = y.clamp(0, height as isize - 1) as usize;
        let x = x.clamp(0, width as isize - 1) as usize;
        white[(y * width + x) * CHANNELS + c]
    };
    let mut out = Vec::with_capacity(white.len());
    for y in 0..height as isize {
        for x in 0..width as isize {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += at(y + dy, x + dx, c);
                    }
                }
                out.push(acc / 9.0);
            }
        }
    }
    out
}

/// Impulse noise: each pixel is hit with probability `density` and set to
/// white or black (equal odds) across all channels.
pub fn add_salt_pepper<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, density: f64, rng: &mut R) -> ImageTensor<T> {
    if density == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(CHANNELS) {
        if rng.random::<f64>() < density {
            let v = if rng.random::<bool>() { T::one() } else { T::zero() };
            px.fill(v);
        }
    }
    out
}

/// Stage parameters of the five-stage mixture degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureParams {
    pub gaussian_var: f64,
    pub speckle_var_first: f64,
    pub poisson_alpha: f64,
    pub salt_pepper_density: f64,
    pub speckle_var_second: f64,
}

pub const MIXTURE_LEVELS: [MixtureParams; 4] = [
    MixtureParams {
        gaussian_var: 0.003,
        speckle_var_first: 0.003,
        poisson_alpha: 1.0,
        salt_pepper_density: 0.002,
        speckle_var_second: 0.003,
    },
    MixtureParams {
        gaussian_var: 0.004,
        speckle_var_first: 0.004,
        poisson_alpha: 1.0,
        salt_pepper_density: 0.002,
        speckle_var_second: 0.004,
    },
    MixtureParams {
        gaussian_var: 0.006,
        speckle_var_first: 0.006,
        poisson_alpha: 1.0,
        salt_pepper_density: 0.003,
        speckle_var_second: 0.006,
    },
    MixtureParams {
        gaussian_var: 0.008,
        speckle_var_first: 0.008,
        poisson_alpha: 1.0,
        salt_pepper_density: 0.004,
        speckle_var_second: 0.008,
    },
];

pub fn mixture_params(level: u8) -> Result<MixtureParams> {
    match level {
        1..=4 => Ok(MIXTURE_LEVELS[level as usize - 1]),
        _ => Err(Error::Parameter(format!("mixture level must be 1..=4, got {level}"))),
    }
}

/// Gaussian → speckle → Poisson → salt & pepper → speckle, clipping after each stage.
pub fn add_mixture_with<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, p: &MixtureParams, rng: &mut R) -> ImageTensor<T> {
    let out = add_gaussian_std(img, p.gaussian_var.sqrt(), rng);
    let out = add_speckle(&out, p.speckle_var_first, rng);
    let out = add_poisson(&out, p.poisson_alpha, rng);
    let out = add_salt_pepper(&out, p.salt_pepper_density, rng);
    add_speckle(&out, p.speckle_var_second, rng)
}

pub fn add_mixture<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, level: u8, rng: &mut R) -> Result<ImageTensor<T>> {
    Ok(add_mixture_with(img, &mixture_params(level)?, rng))
}
