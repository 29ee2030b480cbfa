//! Window partitioning with optional cyclic shift.
//!
//! Token maps are stored as `[batch * H * W, C]` rows in row-major spatial
//! order. Windowed order lists windows row-major per image, and tokens
//! row-major inside each window.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check(height: usize, width: usize, m: usize) -> Result<()> {
    if m == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
        return Err(Error::Dimension(format!("{height}x{width} grid is not divisible by window {m}")));
    }
    Ok(())
}

/// For each windowed row, the spatial row it reads from. With `shift > 0`
/// the grid is first rolled by `-shift` along both axes.
pub fn partition_index(batch: usize, height: usize, width: usize, m: usize, shift: usize) -> Result<Vec<usize>> {
    check(height, width, m)?;
    let (wh, ww) = (height / m, width / m);
    let mut index = Vec::with_capacity(batch * height * width);
    for b in 0..batch {
        for wy in 0..wh {
            for wx in 0..ww {
                for iy in 0..m {
                    for ix in 0..m {
                        let y = (wy * m + iy + shift) % height;
                        let x = (wx * m + ix + shift) % width;
                        index.push(b * height * width + y * width + x);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Inverse of [`partition_index`]: for each spatial row, its windowed row.
pub fn merge_index(batch: usize, height: usize, width: usize, m: usize, shift: usize) -> Result<Vec<usize>> {
    let fwd = partition_index(batch, height, width, m, shift)?;
    let mut inv = vec![0; fwd.len()];
    for (r, &s) in fwd.iter().enumerate() {
        inv[s] = r;
    }
    Ok(inv)
}

fn gather<T: Scalar>(rows: &[T], c: usize, index: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(index.len() * c);
    for &i in index {
        out.extend_from_slice(&rows[i * c..(i + 1) * c]);
    }
    out
}

/// `[H, W, C]` feature map to `[HW / M², M², C]` windows.
pub fn window_partition<T: Scalar>(feat: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let [h, w, c] = dims3(feat)?;
    let index = partition_index(1, h, w, m, 0)?;
    Ok(Tensor::new(vec![h * w / (m * m), m * m, c], gather(feat.data(), c, &index))?)
}

/// Inverse of [`window_partition`] for an `H × W` grid.
pub fn window_merge<T: Scalar>(windows: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let [n, l, c] = dims3(windows)?;
    let m = (l as f64).sqrt().round() as usize;
    if m * m != l || n * l != height * width {
        return Err(Error::Dimension(format!("{n} windows of {l} tokens do not tile {height}x{width}")));
    }
    let index = merge_index(1, height, width, m, 0)?;
    Ok(Tensor::new(vec![height, width, c], gather(windows.data(), c, &index))?)
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::Dimension(format!("expected a 3-D tensor, got {s:?}"))),
    }
}
