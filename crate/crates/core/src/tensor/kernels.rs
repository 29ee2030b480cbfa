//! Loop kernels behind the graph ops. All reductions run in a fixed
//! sequential order so results never depend on scheduling.

use crate::scalar::{gemm, MatView, Scalar};

/// `out[m×n] = a[m×k] · b[k×n]`, all dense row-major.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        a,
        MatView::dense(m, k),
        b,
        MatView::dense(k, n),
        T::zero(),
        out,
        MatView::dense(m, n),
    );
}

const LANES: usize = 8;

/// Sum with eight interleaved accumulators combined in a fixed order.
#[inline]
pub fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a += v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline]
fn lane_max<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a = if v > *a { v } else { *a };
    }
    acc.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m })
}

/// Numerically stabilised softmax over each row of length `n`, in place.
/// Entries equal to `-inf` receive probability zero.
pub fn softmax_rows<T: Scalar>(x: &mut [T], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = lane_max(row);
        for v in row.iter_mut() {
            *v -= max;
        }
        T::exp_in_place(row);
        let inv = T::one() / lane_sum(row);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Given softmax output `p` and upstream gradient `g` (both rows of `n`),
/// overwrite `g` with the gradient w.r.t. the logits.
pub fn softmax_rows_backward<T: Scalar>(p: &[T], g: &mut [T], n: usize) {
    for (prow, grow) in p.chunks_exact(n).zip(g.chunks_exact_mut(n)) {
        let mut dot = [T::zero(); LANES];
        for (pc, gc) in prow.chunks(LANES).zip(grow.chunks(LANES)) {
            for ((a, &pv), &gv) in dot.iter_mut().zip(pc).zip(gc) {
                *a += pv * gv;
            }
        }
        let dot = lane_sum(&dot);
        for (gv, &pv) in grow.iter_mut().zip(prow.iter()) {
            *gv = pv * (*gv - dot);
        }
    }
}

/// Row-wise layer normalisation. Returns per-row `(mean, 1/std)`.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let c = gamma.len();
    let rows = x.len() / c;
    let inv_c = T::one() / T::of(c as f64);
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, or) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..c {
            or[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Backward of [`layer_norm_rows`]. Accumulates into `dx`, `dgamma`, `dbeta`
/// when they are provided.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    gout: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let c = gamma.len();
    let inv_c = T::one() / T::of(c as f64);
    let mut xhat = vec![T::zero(); c];
    for (r, (xr, gr)) in x.chunks_exact(c).zip(gout.chunks_exact(c)).enumerate() {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..c {
            xhat[j] = (xr[j] - mean) * rstd;
            let d = gr[j] * gamma[j];
            sum_d += d;
            sum_dx += d * xhat[j];
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..c {
                dg[j] += gr[j] * xhat[j];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..c {
                db[j] += gr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[r * c..(r + 1) * c];
            for j in 0..c {
                let d = gr[j] * gamma[j];
                dxr[j] += rstd * (d - sum_d * inv_c - xhat[j] * sum_dx * inv_c);
            }
        }
    }
}

const GELU_CUBIC: f64 = 0.044715;
const GELU_CHUNK: usize = 1024;

/// Tanh-approximated GELU, `0.5·x·(1 + tanh(u))` with
/// `u = √(2/π)·(x + 0.044715·x³)`, evaluated as `x·σ(2u)`.
pub fn gelu_slice<T: Scalar>(x: &[T], out: &mut [T]) {
    let c = T::of(-2.0 * (2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(GELU_CUBIC);
    for (xs, os) in x.chunks(GELU_CHUNK).zip(out.chunks_mut(GELU_CHUNK)) {
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = c * (v + k * v * v * v);
        }
        T::exp_in_place(os);
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = v / (T::one() + *o);
        }
    }
}

/// Accumulate `g · gelu'(x)` into `dx`.
pub fn gelu_backward_slice<T: Scalar>(x: &[T], g: &[T], dx: &mut [T]) {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let neg2c = T::of(-2.0 * c);
    let two_c = T::of(2.0 * c);
    let k = T::of(GELU_CUBIC);
    let k3 = T::of(3.0 * GELU_CUBIC);
    let mut s = [T::zero(); GELU_CHUNK];
    for ((xs, gs), ds) in x.chunks(GELU_CHUNK).zip(g.chunks(GELU_CHUNK)).zip(dx.chunks_mut(GELU_CHUNK)) {
        let s = &mut s[..xs.len()];
        for (sv, &v) in s.iter_mut().zip(xs) {
            *sv = neg2c * (v + k * v * v * v);
        }
        T::exp_in_place(s);
        for (((d, &sv), &v), &gv) in ds.iter_mut().zip(s.iter()).zip(xs).zip(gs) {
            let sig = T::one() / (T::one() + sv);
            let grad = sig + v * sig * (T::one() - sig) * two_c * (T::one() + k3 * v * v);
            *d += gv * grad;
        }
    }
}

/// Column sums of a `[rows, n]` matrix, accumulated into `out`.
pub fn add_column_sums<T: Scalar>(x: &[T], n: usize, out: &mut [T]) {
    for row in x.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Fill `cols` with the 3×3 zero-padded neighbourhoods of one `[h, w, c]`
/// image; row `y*w+x`, column `(ky*3+kx)*c + ch`.
pub fn im2col3x3<T: Scalar>(img: &[T], h: usize, w: usize, c: usize, cols: &mut [T]) {
    let width = 9 * c;
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * width..(y * w + x + 1) * width];
            for ky in 0..3 {
                for kx in 0..3 {
                    let dst = &mut row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: scatter-add column gradients back to the image.
pub fn col2im3x3<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, img: &mut [T]) {
    let width = 9 * c;
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * width..(y * w + x + 1) * width];
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = &row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    for (d, &s) in img[dst..dst + c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_known_values() {
        let mut x = [0.0f64, 0.0];
        softmax_rows(&mut x, 2);
        assert_eq!(x, [0.5, 0.5]);

        let mut x = [2.0f64.ln(), 0.0];
        softmax_rows(&mut x, 2);
        assert!((x[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((x[1] - 1.0 / 3.0).abs() < 1e-15);

        let mut x = [1000.0f32, 1000.0];
        softmax_rows(&mut x, 2);
        assert_eq!(x, [0.5, 0.5]);
    }

    #[test]
    fn softmax_masks_neg_infinity() {
        let mut x = [0.0f64, f64::NEG_INFINITY, 0.0];
        softmax_rows(&mut x, 3);
        assert_eq!(x, [0.5, 0.0, 0.5]);
    }

    fn gelu_tanh(x: f64) -> f64 {
        let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_CUBIC * x * x * x);
        0.5 * x * (1.0 + u.tanh())
    }

    #[test]
    fn gelu_matches_tanh_form() {
        let xs = [-6.0f64, -3.0, -0.7, 0.0, 0.4, 2.5, 9.0];
        let mut out = [0.0; 7];
        gelu_slice(&xs, &mut out);
        for (&x, &y) in xs.iter().zip(&out) {
            assert!((y - gelu_tanh(x)).abs() < 1e-14, "x={x}");
        }
        let xs32: Vec<f32> = xs.iter().map(|&v| v as f32).collect();
        let mut out32 = [0.0f32; 7];
        gelu_slice(&xs32, &mut out32);
        for (&x, &y) in xs.iter().zip(&out32) {
            assert!((y as f64 - gelu_tanh(x)).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        let xs = [-3.0f64, -0.7, 0.0, 0.4, 2.5];
        let mut dx = [0.0; 5];
        gelu_backward_slice(&xs, &[1.0; 5], &mut dx);
        for (&x, &d) in xs.iter().zip(&dx) {
            let h = 1e-6;
            let fd = (gelu_tanh(x + h) - gelu_tanh(x - h)) / (2.0 * h);
            assert!((fd - d).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (h, w, c) = (3, 4, 2);
        let x: Vec<f64> = (0..h * w * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..h * w * 9 * c).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col3x3(&x, h, w, c, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im3x3(&y, h, w, c, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
