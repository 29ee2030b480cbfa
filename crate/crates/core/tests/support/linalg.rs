//! Reference linear algebra on top of nalgebra, independent of the crate's kernels.

use maskdn::cka::FeatureMatrix;
use maskdn::noise::seeded_rng;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

pub fn to_dmatrix(x: &FeatureMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.data())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> FeatureMatrix<f64> {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    FeatureMatrix::new(m.nrows(), m.ncols(), data).unwrap()
}

/// Q factor of a Gaussian matrix.
pub fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded_rng(seed);
    let a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    a.qr().q()
}

pub fn matmul(x: &FeatureMatrix<f64>, r: &DMatrix<f64>) -> FeatureMatrix<f64> {
    from_dmatrix(&(to_dmatrix(x) * r))
}

pub fn scale(x: &FeatureMatrix<f64>, c: f64) -> FeatureMatrix<f64> {
    from_dmatrix(&(to_dmatrix(x) * c))
}

/// Linear CKA from column-centred features: `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)`.
pub fn feature_space_cka(x: &FeatureMatrix<f64>, y: &FeatureMatrix<f64>) -> f64 {
    let centre = |m: DMatrix<f64>| {
        let means = m.row_mean();
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - means[j])
    };
    let (xc, yc) = (centre(to_dmatrix(x)), centre(to_dmatrix(y)));
    let cross = (yc.transpose() * &xc).norm_squared();
    cross / ((xc.transpose() * &xc).norm() * (yc.transpose() * &yc).norm())
}

/// Eigenvalues of a symmetric matrix given row-major.
pub fn symmetric_eigenvalues(data: &[f64], n: usize) -> Vec<f64> {
    DMatrix::from_row_slice(n, n, data).symmetric_eigen().eigenvalues.iter().copied().collect()
}
