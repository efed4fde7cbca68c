#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use neumann_ra::design_matrix::{normalize, NormalizedDesign, RawCovariates};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_design(n: usize, p: usize, seed: u64) -> NormalizedDesign {
    let mut r = rng(seed);
    let raw = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    normalize(&RawCovariates::new(raw).unwrap()).unwrap()
}

pub fn gaussian_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// Residuals of `y` on `[1, X]`, via an SVD least-squares solve.
pub fn residualize_svd(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let mut a = DMatrix::from_element(n, x.ncols() + 1, 1.0);
    a.columns_mut(1, x.ncols()).copy_from(x);
    let yv = DVector::from_column_slice(y);
    let coef = a.clone().svd(true, true).solve(&yv, 1e-13).unwrap();
    (yv - a * coef).iter().copied().collect()
}

/// Intercept and slopes of `y` on `[1, X]` restricted to `units`.
pub fn subset_ols_svd(x: &DMatrix<f64>, y: &[f64], units: &[usize]) -> (f64, DVector<f64>) {
    let p = x.ncols();
    let a = DMatrix::from_fn(units.len(), p + 1, |r, c| if c == 0 { 1.0 } else { x[(units[r], c - 1)] });
    let yv = DVector::from_iterator(units.len(), units.iter().map(|&i| y[i]));
    let coef = a.svd(true, true).solve(&yv, 1e-13).unwrap();
    (coef[0], coef.rows(1, p).into_owned())
}

/// `(m−1)(n−m)n / (m²(n−1)(n−2)) · (‖x_i‖² − p)`.
pub fn degree_zero_closed_form(design: &NormalizedDesign, m: usize) -> Vec<f64> {
    let (n, mf, p) = (design.n() as f64, m as f64, design.p() as f64);
    let c = (mf - 1.0) * (n - mf) * n / (mf * mf * (n - 1.0) * (n - 2.0));
    design.row_norms_sq().iter().map(|q| c * (q - p)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
