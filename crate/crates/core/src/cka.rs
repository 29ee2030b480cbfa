//! Linear centered kernel alignment between layer activations.
//!
//! `K = XXᵀ`, `K′ = HKH` with `H = I − 11ᵀ/m`,
//! `HSIC(K, L) = vec(K′)·vec(L′) / (m − 1)²` and
//! `CKA = HSIC(K, L) / √(HSIC(K, K)·HSIC(L, L))`.

use std::io::Write;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::noise::seeded_rng;
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

/// Token positions sampled per analysis.
pub const DEFAULT_POSITIONS: usize = 1024;

/// `m × p` activations: one row per sampled data point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows < 2 {
            return Err(Error::Dimension(format!("feature matrix needs at least 2 rows, got {rows}")));
        }
        if cols == 0 || data.len() != rows * cols {
            return Err(Error::Dimension(format!("{} values for a {rows}x{cols} feature matrix", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("feature matrix holds non-finite values".into()));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!("features must be 2-D, got shape {:?}", t.shape())));
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("consistent by construction")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Keep the given rows, in the given order.
    pub fn select_rows(&self, index: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &r in index {
            if r >= self.rows {
                return Err(Error::Dimension(format!("row {r} out of {}", self.rows)));
            }
            data.extend_from_slice(&self.data[r * self.cols..(r + 1) * self.cols]);
        }
        Self::new(index.len(), self.cols, data)
    }
}

/// Square `m × m` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram<T> {
    size: usize,
    data: Vec<T>,
}

impl<T: Scalar> Gram<T> {
    pub fn new(size: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::Dimension(format!("{} values is not a {size}x{size} matrix", data.len())));
        }
        Ok(Gram { size, data })
    }

    /// Accepts any `rows × cols` buffer and rejects it unless square.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows != cols {
            return Err(Error::Dimension(format!("gram matrix must be square, got {rows}x{cols}")));
        }
        Self::new(rows, data)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.size + j]
    }
}

/// `K = X Xᵀ`.
pub fn gram_linear<T: Scalar>(x: &FeatureMatrix<T>) -> Gram<T> {
    let (m, p) = (x.rows, x.cols);
    let mut k = vec![T::zero(); m * m];
    let xv = MatView::dense(m, p);
    gemm(T::one(), &x.data, xv, &x.data, xv.t(), T::zero(), &mut k, MatView::dense(m, m));
    // The product is symmetric in exact arithmetic; make it so bitwise.
    for i in 0..m {
        for j in i + 1..m {
            let v = k[i * m + j];
            k[j * m + i] = v;
        }
    }
    Gram { size: m, data: k }
}

/// `K′ = H K H`: subtract row and column means, add back the grand mean.
pub fn center_gram<T: Scalar>(k: &Gram<T>) -> Gram<T> {
    let m = k.size;
    let inv = T::one() / T::of(m as f64);
    let row_means: Vec<T> = k.data.chunks_exact(m).map(|r| r.iter().copied().sum::<T>() * inv).collect();
    let col_means: Vec<T> = (0..m).map(|j| (0..m).map(|i| k.data[i * m + j]).sum::<T>() * inv).collect();
    let grand = row_means.iter().copied().sum::<T>() * inv;
    let mut out = vec![T::zero(); m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = k.data[i * m + j] - row_means[i] - col_means[j] + grand;
        }
    }
    Gram { size: m, data: out }
}

/// `vec(K′)·vec(L′) / (m − 1)²`.
pub fn hsic<T: Scalar>(k: &Gram<T>, l: &Gram<T>) -> Result<T> {
    if k.size != l.size {
        return Err(Error::Dimension(format!("HSIC of {0}x{0} and {1}x{1} matrices", k.size, l.size)));
    }
    if k.size < 2 {
        return Err(Error::Dimension("HSIC needs at least 2 data points".into()));
    }
    let (kc, lc) = (center_gram(k), center_gram(l));
    let dot: T = kc.data.iter().zip(&lc.data).map(|(&a, &b)| a * b).sum();
    let denom = T::of(((k.size - 1) * (k.size - 1)) as f64);
    Ok(dot / denom)
}

/// Linear CKA between two feature sets on the same data points.
pub fn cka<T: Scalar>(x: &FeatureMatrix<T>, y: &FeatureMatrix<T>) -> Result<T> {
    if x.rows != y.rows {
        return Err(Error::Dimension(format!("CKA needs the same data points, got {} and {} rows", x.rows, y.rows)));
    }
    let (k, l) = (gram_linear(x), gram_linear(y));
    cka_from_grams(&k, &l)
}

fn cka_from_grams<T: Scalar>(k: &Gram<T>, l: &Gram<T>) -> Result<T> {
    let kl = hsic(k, l)?;
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    let denom = (kk * ll).sqrt();
    if !(denom > T::zero()) || !denom.is_finite() {
        return Err(Error::Degenerate("CKA denominator is zero: a feature set is constant across data points".into()));
    }
    Ok(kl / denom)
}

/// Pairwise CKA between two lists of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix<T> {
    pub labels_a: Vec<String>,
    pub labels_b: Vec<String>,
    /// Row-major `labels_a.len() × labels_b.len()`.
    pub values: Vec<T>,
}

impl<T: Scalar> CkaMatrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.labels_b.len() + j]
    }

    /// Header row `layer,<labels_b...>`, then one row per entry of `labels_a`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        write!(out, "layer")?;
        for b in &self.labels_b {
            write!(out, ",{b}")?;
        }
        writeln!(out)?;
        for (i, a) in self.labels_a.iter().enumerate() {
            write!(out, "{a}")?;
            for j in 0..self.labels_b.len() {
                write!(out, ",{}", self.get(i, j))?;
            }
            writeln!(out)?;
        }
        out.flush()
    }
}

/// Entry `(i, j)` is `cka(a[i], b[j])`. Gram matrices are formed once per layer.
pub fn cka_matrix<T: Scalar>(
    a: &[(String, FeatureMatrix<T>)],
    b: &[(String, FeatureMatrix<T>)],
) -> Result<CkaMatrix<T>> {
    let m = a.first().or(b.first()).map(|(_, f)| f.rows);
    for (name, f) in a.iter().chain(b) {
        if Some(f.rows) != m {
            return Err(Error::Dimension(format!("layer {name} has {} rows, expected {}", f.rows, m.unwrap_or(0))));
        }
    }
    let grams_a: Vec<Gram<T>> = a.iter().map(|(_, f)| gram_linear(f)).collect();
    let grams_b: Vec<Gram<T>> = b.iter().map(|(_, f)| gram_linear(f)).collect();
    let mut values = Vec::with_capacity(a.len() * b.len());
    for ka in &grams_a {
        for kb in &grams_b {
            values.push(cka_from_grams(ka, kb)?);
        }
    }
    Ok(CkaMatrix {
        labels_a: a.iter().map(|(n, _)| n.clone()).collect(),
        labels_b: b.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

/// Per-dimension summary of one feature set.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FeatureStats {
    pub rows: usize,
    pub mean: Vec<f64>,
    /// Population standard deviation per dimension.
    pub std: Vec<f64>,
    /// Mean of the per-dimension means.
    pub overall_mean: f64,
}

pub fn feature_stats<T: Scalar>(x: &FeatureMatrix<T>) -> FeatureStats {
    let (m, p) = (x.rows, x.cols);
    let mut mean = vec![0.0; p];
    for row in x.data.chunks_exact(p) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v.as_f64();
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut var = vec![0.0; p];
    for row in x.data.chunks_exact(p) {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - mu;
            *acc += d * d;
        }
    }
    let std = var.iter().map(|v| (v / m as f64).sqrt()).collect();
    let overall_mean = mean.iter().sum::<f64>() / p as f64;
    FeatureStats { rows: m, mean, std, overall_mean }
}

/// `count` distinct positions out of `total`, sorted, fixed by `seed`.
/// Returns every position when `count >= total`.
pub fn sample_positions(total: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= total {
        return (0..total).collect();
    }
    let mut idx = sample(&mut seeded_rng(seed), total, count).into_vec();
    idx.sort_unstable();
    idx
}
