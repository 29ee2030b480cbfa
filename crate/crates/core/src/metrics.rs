//! PSNR and SSIM on RGB images in `[0, 1]`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::scalar::Scalar;

/// Reported for identical images instead of +∞, and the upper bound otherwise.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    check_dims(a, b)?;
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    Ok(acc / a.data().len() as f64)
}

/// `10·log10(1 / MSE)` over all pixels and channels, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.map(|t| t / total)
}

/// Separable "valid" Gaussian filtering of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * plane[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1, evaluated at every fully-contained window position,
/// per channel, then averaged over channels.
pub fn ssim<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..CHANNELS {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(CHANNELS).map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(CHANNELS).map(|v| v.as_f64()).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / CHANNELS as f64)
}

/// Scores of one clean/degraded pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image scores and their means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<ImageScore>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<ImageScore>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        MetricReport { rows, mean_psnr_db, mean_ssim }
    }
}

pub fn score<T: Scalar>(name: impl Into<String>, clean: &ImageTensor<T>, test: &ImageTensor<T>) -> Result<ImageScore> {
    Ok(ImageScore { image: name.into(), psnr_db: psnr(clean, test)?, ssim: ssim(clean, test)? })
}
