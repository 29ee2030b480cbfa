//! Fused windowed multi-head self-attention with a learnable relative
//! position bias table and the cyclic-shift validity mask.
//!
//! Layout: `qkv` is `[windows * L, 3C]` with `L = M²` tokens per window in
//! row-major window order; columns `[0, C)` hold queries, `[C, 2C)` keys and
//! `[2C, 3C)` values, each split into `heads` contiguous groups of `D = C / heads`.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::kernels::{softmax_rows, softmax_rows_backward};

/// Static description of one windowed attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGeometry {
    window: usize,
    heads: usize,
    windows: usize,
    windows_per_image: usize,
    rel_index: Vec<u32>,
    regions: Option<Vec<u8>>,
}

impl AttentionGeometry {
    /// Geometry for a batch of `height × width` token grids partitioned into
    /// `window × window` windows. A non-zero `shift` marks the grid as
    /// cyclically shifted by that amount, which activates the validity mask
    /// between tokens that were not adjacent before the shift.
    pub fn new(window: usize, heads: usize, batch: usize, height: usize, width: usize, shift: usize) -> Self {
        assert!(window > 0 && heads > 0 && batch > 0);
        assert!(height.is_multiple_of(window) && width.is_multiple_of(window), "grid must be divisible by window");
        assert!(shift < window, "shift must be smaller than the window");
        let l = window * window;
        let span = 2 * window - 1;
        let mut rel_index = Vec::with_capacity(l * l);
        for i in 0..l {
            let (iy, ix) = (i / window, i % window);
            for j in 0..l {
                let (jy, jx) = (j / window, j % window);
                let dy = iy + window - 1 - jy;
                let dx = ix + window - 1 - jx;
                rel_index.push((dy * span + dx) as u32);
            }
        }
        let (wh, ww) = (height / window, width / window);
        let regions = (shift > 0).then(|| {
            let band = |pos: usize, extent: usize| -> u8 {
                if pos < extent - window {
                    0
                } else if pos < extent - shift {
                    1
                } else {
                    2
                }
            };
            let mut labels = Vec::with_capacity(wh * ww * l);
            for wy in 0..wh {
                for wx in 0..ww {
                    for i in 0..l {
                        let y = wy * window + i / window;
                        let x = wx * window + i % window;
                        labels.push(band(y, height) * 3 + band(x, width));
                    }
                }
            }
            labels
        });
        AttentionGeometry {
            window,
            heads,
            windows: batch * wh * ww,
            windows_per_image: wh * ww,
            rel_index,
            regions,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Rows of the relative position table: `(2M - 1)²`.
    pub fn table_rows(&self) -> usize {
        (2 * self.window - 1) * (2 * self.window - 1)
    }

    /// Table row used for the query/key pair `(i, j)` inside a window.
    pub fn rel_index(&self, i: usize, j: usize) -> usize {
        let l = self.tokens_per_window();
        self.rel_index[i * l + j] as usize
    }

    /// Whether query `i` may attend to key `j` inside window `w`.
    pub fn allowed(&self, w: usize, i: usize, j: usize) -> bool {
        match &self.regions {
            None => true,
            Some(labels) => {
                let base = (w % self.windows_per_image) * self.tokens_per_window();
                labels[base + i] == labels[base + j]
            }
        }
    }

    fn window_labels(&self, w: usize) -> Option<&[u8]> {
        let l = self.tokens_per_window();
        self.regions.as_ref().map(|labels| {
            let base = (w % self.windows_per_image) * l;
            &labels[base..base + l]
        })
    }
}

/// Windows whose table-gradient partials are reduced together. Fixed so the
/// summation order never depends on the thread count.
const TABLE_GROUP: usize = 32;

/// `out[jc..jc+B] += Σ_k coefs[k] · mat[k·n + jc..]`, with the `B` partial
/// sums held in registers across the whole `k` sweep.
#[inline(always)]
fn combine_block<T: Scalar, const B: usize>(coefs: &[T], mat: &[T], n: usize, jc: usize, out: &mut [T]) {
    let mut acc = [T::zero(); B];
    acc.copy_from_slice(&out[jc..jc + B]);
    for (k, &c) in coefs.iter().enumerate() {
        let r: &[T; B] = mat[k * n + jc..k * n + jc + B].try_into().expect("block");
        for t in 0..B {
            acc[t] += c * r[t];
        }
    }
    out[jc..jc + B].copy_from_slice(&acc);
}

/// `out[j] += Σ_k coefs[k] · mat[k·n + j]` for `j < n`.
#[inline]
fn combine_rows<T: Scalar>(coefs: &[T], mat: &[T], n: usize, out: &mut [T]) {
    let mut jc = 0;
    while jc + 16 <= n {
        combine_block::<T, 16>(coefs, mat, n, jc, out);
        jc += 16;
    }
    for j in jc..n {
        let mut a = out[j];
        for (k, &c) in coefs.iter().enumerate() {
            a += c * mat[k * n + j];
        }
        out[j] = a;
    }
}

/// Copy a `rows × cols` block read with row stride `stride` from `offset`,
/// scaled by `scale`, into dense row-major `dst`.
fn load_rows<T: Scalar>(src: &[T], offset: usize, stride: usize, rows: usize, cols: usize, scale: T, dst: &mut [T]) {
    for r in 0..rows {
        let row = &src[offset + r * stride..offset + r * stride + cols];
        for (d, &v) in dst[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *d = scale * v;
        }
    }
}

/// `dst[c*rows + r] = src[r*cols + c]` for a `rows × cols` block read with
/// row stride `stride` starting at `offset`.
fn load_transposed<T: Scalar>(src: &[T], offset: usize, stride: usize, rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        let row = &src[offset + r * stride..offset + r * stride + cols];
        for (c, &v) in row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

fn transpose_square<T: Scalar>(src: &[T], n: usize, dst: &mut [T]) {
    for i in 0..n {
        for j in 0..n {
            dst[j * n + i] = src[i * n + j];
        }
    }
}

/// Dense per-head bias `[heads, L, L]` gathered from the table.
fn expand_bias<T: Scalar>(geom: &AttentionGeometry, table: &[T]) -> Vec<T> {
    let l = geom.tokens_per_window();
    let heads = geom.heads;
    let mut bias = vec![T::zero(); heads * l * l];
    for h in 0..heads {
        for (b, &r) in bias[h * l * l..(h + 1) * l * l].iter_mut().zip(&geom.rel_index) {
            *b = table[r as usize * heads + h];
        }
    }
    bias
}

/// Forward pass. Writes the `[rows, C]` output and the attention
/// probabilities `[windows, heads, L, L]`.
pub(crate) fn forward<T: Scalar>(
    geom: &AttentionGeometry,
    channels: usize,
    qkv: &[T],
    table: &[T],
    out: &mut [T],
    probs: &mut [T],
) {
    let l = geom.tokens_per_window();
    let heads = geom.heads;
    let d = channels / heads;
    let stride = 3 * channels;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let bias = expand_bias(geom, table);
    out.par_chunks_mut(l * channels)
        .zip(probs.par_chunks_mut(heads * l * l))
        .enumerate()
        .for_each(|(w, (out_w, probs_w))| {
            let base = w * l * stride;
            let labels = geom.window_labels(w).filter(|lab| lab.iter().any(|&v| v != lab[0]));
            let mut q = vec![T::zero(); l * d];
            let mut kt = vec![T::zero(); d * l];
            let mut vt = vec![T::zero(); d * l];
            let mut pt = vec![T::zero(); l * l];
            let mut ot = vec![T::zero(); d * l];
            for h in 0..heads {
                load_rows(qkv, base + h * d, stride, l, d, scale, &mut q);
                load_transposed(qkv, base + channels + h * d, stride, l, d, &mut kt);
                load_transposed(qkv, base + 2 * channels + h * d, stride, l, d, &mut vt);
                let p = &mut probs_w[h * l * l..(h + 1) * l * l];
                p.copy_from_slice(&bias[h * l * l..(h + 1) * l * l]);
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    combine_rows(&q[i * d..(i + 1) * d], &kt, l, row);
                    if let Some(labels) = labels {
                        for j in 0..l {
                            if labels[i] != labels[j] {
                                row[j] = T::neg_infinity();
                            }
                        }
                    }
                }
                softmax_rows(p, l);
                // Oᵀ[k, :] = Σ_j Vᵀ[k, j] · Pᵀ[j, :]
                transpose_square(p, l, &mut pt);
                ot.fill(T::zero());
                for k in 0..d {
                    combine_rows(&vt[k * l..(k + 1) * l], &pt, l, &mut ot[k * l..(k + 1) * l]);
                }
                for i in 0..l {
                    for k in 0..d {
                        out_w[i * channels + h * d + k] = ot[k * l + i];
                    }
                }
            }
        });
}

/// Backward pass. Accumulates into `dqkv` (when given) and `dtable` (when given).
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    geom: &AttentionGeometry,
    channels: usize,
    qkv: &[T],
    probs: &[T],
    gout: &[T],
    dqkv: Option<&mut [T]>,
    dtable: Option<&mut [T]>,
) {
    let l = geom.tokens_per_window();
    let heads = geom.heads;
    let d = channels / heads;
    let stride = 3 * channels;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let want_table = dtable.is_some();
    let want_qkv = dqkv.is_some();

    // Returns the dense `[heads, L, L]` score gradient summed over the group.
    let per_group = |g: usize, dqkv_g: Option<&mut [T]>| -> Vec<T> {
        let first = g * TABLE_GROUP;
        let last = (first + TABLE_GROUP).min(geom.windows);
        let mut dbias = if want_table { vec![T::zero(); heads * l * l] } else { Vec::new() };
        let mut dqkv_g = dqkv_g;
        let mut qt = vec![T::zero(); d * l];
        let mut kt = vec![T::zero(); d * l];
        let mut vt = vec![T::zero(); d * l];
        let mut go = vec![T::zero(); l * d];
        let mut got = vec![T::zero(); d * l];
        let mut ds = vec![T::zero(); l * l];
        let mut dst = vec![T::zero(); l * l];
        let mut dqt = vec![T::zero(); d * l];
        let mut dkt = vec![T::zero(); d * l];
        let mut dvt = vec![T::zero(); d * l];
        for w in first..last {
            let base = w * l * stride;
            for h in 0..heads {
                let p = &probs[(w * heads + h) * l * l..(w * heads + h + 1) * l * l];
                load_rows(gout, w * l * channels + h * d, channels, l, d, T::one(), &mut go);
                load_transposed(qkv, base + 2 * channels + h * d, stride, l, d, &mut vt);
                // dP[i, :] = Σ_k dO[i, k] · Vᵀ[k, :]
                ds.fill(T::zero());
                for i in 0..l {
                    combine_rows(&go[i * d..(i + 1) * d], &vt, l, &mut ds[i * l..(i + 1) * l]);
                }
                if want_qkv {
                    // dVᵀ[k, :] = Σ_i dOᵀ[k, i] · P[i, :]
                    load_transposed(gout, w * l * channels + h * d, channels, l, d, &mut got);
                    dvt.fill(T::zero());
                    for k in 0..d {
                        combine_rows(&got[k * l..(k + 1) * l], p, l, &mut dvt[k * l..(k + 1) * l]);
                    }
                }
                softmax_rows_backward(p, &mut ds, l);
                if want_table {
                    for (acc, &v) in dbias[h * l * l..(h + 1) * l * l].iter_mut().zip(&ds) {
                        *acc += v;
                    }
                }
                if let Some(dq) = dqkv_g.as_deref_mut() {
                    load_transposed(qkv, base + h * d, stride, l, d, &mut qt);
                    load_transposed(qkv, base + channels + h * d, stride, l, d, &mut kt);
                    for v in qt.iter_mut().chain(kt.iter_mut()) {
                        *v *= scale;
                    }
                    transpose_square(&ds, l, &mut dst);
                    dqt.fill(T::zero());
                    dkt.fill(T::zero());
                    for k in 0..d {
                        // dQᵀ[k, :] = s · Σ_j Kᵀ[k, j] · dSᵀ[j, :]
                        combine_rows(&kt[k * l..(k + 1) * l], &dst, l, &mut dqt[k * l..(k + 1) * l]);
                        // dKᵀ[k, :] = s · Σ_i Qᵀ[k, i] · dS[i, :]
                        combine_rows(&qt[k * l..(k + 1) * l], &ds, l, &mut dkt[k * l..(k + 1) * l]);
                    }
                    let local = (w - first) * l * stride;
                    for i in 0..l {
                        let r = &mut dq[local + i * stride..local + (i + 1) * stride];
                        for k in 0..d {
                            r[h * d + k] += dqt[k * l + i];
                            r[channels + h * d + k] += dkt[k * l + i];
                            r[2 * channels + h * d + k] += dvt[k * l + i];
                        }
                    }
                }
            }
        }
        dbias
    };

    let groups = geom.windows.div_ceil(TABLE_GROUP);
    let partials: Vec<Vec<T>> = match dqkv {
        Some(dq) => dq
            .par_chunks_mut(TABLE_GROUP * l * stride)
            .enumerate()
            .map(|(g, chunk)| per_group(g, Some(chunk)))
            .collect(),
        None => (0..groups).into_par_iter().map(|g| per_group(g, None)).collect(),
    };
    if let Some(dt) = dtable {
        let mut dbias = vec![T::zero(); heads * l * l];
        for part in &partials {
            for (acc, &v) in dbias.iter_mut().zip(part) {
                *acc += v;
            }
        }
        for h in 0..heads {
            for (&v, &r) in dbias[h * l * l..(h + 1) * l * l].iter().zip(&geom.rel_index) {
                dt[r as usize * heads + h] += v;
            }
        }
    }
}
