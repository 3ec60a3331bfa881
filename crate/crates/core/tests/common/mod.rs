#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use redsketch::operators::materialize;
use redsketch::solver::DataTerm;
use redsketch::spectral::SqrtHessian;
use redsketch::{KroneckerMap, LinearMap, RadonGeometry, RayRadon, SpectralMeasurement};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

pub fn uniform_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0.0..1.0)).collect()
}

pub fn random_matrix(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut r))
}

/// Sum of a few Gaussian bumps with widths of at least `min_sigma` pixels,
/// kept well inside the field of view.
pub fn smooth_phantom(side: usize, min_sigma: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let s = side as f64;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                r.random_range(0.3 * s..0.7 * s),
                r.random_range(0.3 * s..0.7 * s),
                r.random_range(min_sigma..2.0 * min_sigma),
                r.random_range(0.5..1.5),
            )
        })
        .collect();
    let mut img = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            img[row * side + col] = bumps
                .iter()
                .map(|&(cx, cy, sg, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sg * sg)).exp())
                .sum();
        }
    }
    img
}

/// Random symmetric PSD matrix with eigenvalues in `[lo, hi]`.
pub fn spd_matrix(n: usize, lo: f64, hi: f64, seed: u64) -> DMatrix<f64> {
    let q = random_matrix(n, n, seed).qr().q();
    let mut r = rng(seed ^ 0x5eed);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| r.random_range(lo..hi)));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

pub struct Instance {
    pub a: KroneckerMap,
    pub meas: SpectralMeasurement,
    pub truth: Vec<f64>,
}

/// Two materials, two bins, side × side pixels, data `y = A x + noise`.
pub fn instance(side: usize, views: usize, noise: f64, seed: u64) -> Instance {
    let radon = RayRadon::new(RadonGeometry::parallel(side, views).unwrap());
    let c = DMatrix::from_row_slice(2, 2, &[0.03, 0.09, 0.02, 0.04]);
    let a = KroneckerMap::new(c, Arc::new(radon));
    let truth: Vec<f64> = [smooth_phantom(side, 2.0, seed), smooth_phantom(side, 2.0, seed + 1)].concat();
    let mut y = a.apply(&truth).unwrap();
    let w: Vec<f64> = uniform_vec(y.len(), seed + 2).iter().map(|u| 200.0 + 800.0 * u).collect();
    for ((yi, wi), e) in y.iter_mut().zip(&w).zip(gaussian_vec(w.len(), seed + 3)) {
        *yi += noise * e / wi.sqrt();
    }
    Instance {
        a,
        meas: SpectralMeasurement {
            counts: w.clone(),
            log_data: y,
            inv_cov_diag: w,
        },
        truth,
    }
}

pub fn data_term(inst: &Instance) -> DataTerm<SqrtHessian<KroneckerMap>> {
    DataTerm::from_measurement(&inst.meas, inst.a.clone()).unwrap()
}

pub fn dense_wls(inst: &Instance) -> Vec<f64> {
    let am = materialize(&inst.a);
    let w = DVector::from_column_slice(&inst.meas.inv_cov_diag);
    let mut wa = am.clone();
    for (mut row, wi) in wa.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    let normal = am.transpose() * &wa;
    let rhs = wa.transpose() * DVector::from_column_slice(&inst.meas.log_data);
    normal.cholesky().unwrap().solve(&rhs).as_slice().to_vec()
}
