//! Random token masking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Independent Bernoulli(`p`) draw per row. `p == 0` consumes no randomness.
pub fn sample_mask<R: Rng + ?Sized>(rows: usize, p: f64, rng: &mut R) -> Vec<bool> {
    if p <= 0.0 {
        return vec![false; rows];
    }
    (0..rows).map(|_| rng.random::<f64>() < p).collect()
}

/// Uniform draw from `[lo, hi]`; degenerate ranges consume no randomness.
pub fn sample_ratio<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    let [lo, hi] = range;
    if hi <= lo {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Replace each token row of `tokens` (`[..., C]`) by `token` with
/// probability `p`. Returns the masked tokens and the per-row mask map.
pub fn apply_input_mask<T: Scalar, R: Rng + ?Sized>(
    tokens: &Tensor<T>,
    p: f64,
    token: &[T],
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("mask ratio must be in [0, 1], got {p}")));
    }
    let c = tokens.last_dim();
    if token.len() != c {
        return Err(Error::Dimension(format!("mask token has {} entries, tokens have {c}", token.len())));
    }
    let mask = sample_mask(tokens.rows(), p, rng);
    let mut out = tokens.clone();
    for (row, &m) in out.data_mut().chunks_exact_mut(c).zip(&mask) {
        if m {
            row.copy_from_slice(token);
        }
    }
    Ok((out, mask))
}
