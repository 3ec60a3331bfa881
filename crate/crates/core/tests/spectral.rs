mod common;

use std::sync::Arc;

use common::{gaussian_vec, random_matrix, uniform_vec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use redsketch::experiment::{bundled_data_dir, Experiment, RunConfig};
use redsketch::linalg::{dot, norm, rel_diff};
use redsketch::operators::materialize;
use redsketch::spectral::{log_linearize, loss_eval, loss_gradient, simulate_counts, sqrt_hessian};
use redsketch::{KroneckerMap, LinearMap, MaterialBasis, RadonGeometry, RayRadon, SpectralMeasurement, SpectrumTable};

fn system(side: usize, nb: usize, nm: usize, seed: u64) -> KroneckerMap {
    let radon = RayRadon::new(RadonGeometry::parallel(side, 7).unwrap());
    let c = random_matrix(nb, nm, seed).map(|v| v.abs() * 0.1 + 0.01);
    KroneckerMap::new(c, Arc::new(radon))
}

fn measurement(a: &dyn LinearMap, seed: u64) -> SpectralMeasurement {
    let counts: Vec<f64> = uniform_vec(a.rows(), seed).iter().map(|u| 20.0 + 500.0 * u).collect();
    let nb = 2;
    log_linearize(&vec![600.0; nb], &counts).unwrap()
}

#[test]
fn single_energy_counts_follow_beer_law() {
    let g = RadonGeometry::parallel(8, 5).unwrap();
    let radon = RayRadon::new(g);
    let spec = SpectrumTable::monochromatic(vec![40.0], vec![1e4]).unwrap();
    let basis = MaterialBasis::new(vec!["w".into()], DMatrix::from_element(1, 1, 0.2)).unwrap();
    let x = uniform_vec(64, 3);
    let counts = simulate_counts(&spec, &basis, &radon, &x, None).unwrap();
    let lines = radon.apply(&x).unwrap();
    for (p, l) in counts.iter().zip(&lines) {
        assert!((p - 1e4 * (-0.2 * l).exp()).abs() <= 1e-9 * p);
    }
}

#[test]
fn loss_matches_dense_quadratic_form() {
    let a = system(8, 2, 2, 1);
    let meas = measurement(&a, 2);
    let x = uniform_vec(a.cols(), 3);
    let am = materialize(&a);
    let r = &am * DVector::from_column_slice(&x) - DVector::from_column_slice(&meas.log_data);
    let w = DVector::from_column_slice(&meas.inv_cov_diag);
    let dense = 0.5 * r.component_mul(&r).dot(&w);
    let f = loss_eval(&meas, &a, &x).unwrap();
    assert!((f - dense).abs() <= 1e-12 * dense);
}

#[test]
fn gradient_matches_central_differences() {
    let a = system(16, 2, 2, 4);
    let meas = measurement(&a, 5);
    let x = uniform_vec(a.cols(), 6);
    let g = loss_gradient(&meas, &a, &x).unwrap();
    for k in 0..12 {
        let v = gaussian_vec(a.cols(), 100 + k);
        let h = 1e-3 / norm(&v);
        let shift = |t: f64| -> Vec<f64> { x.iter().zip(&v).map(|(xi, vi)| xi + t * vi).collect() };
        let fd = (loss_eval(&meas, &a, &shift(h)).unwrap() - loss_eval(&meas, &a, &shift(-h)).unwrap()) / (2.0 * h);
        let exact = dot(&g, &v);
        assert!((fd - exact).abs() <= 1e-6 * exact.abs(), "{k}: {fd} vs {exact}");
    }
}

#[test]
fn gradient_vanishes_at_zero_residual() {
    let a = system(8, 2, 2, 7);
    let x = uniform_vec(a.cols(), 8);
    let y = a.apply(&x).unwrap();
    let meas = SpectralMeasurement {
        counts: vec![1.0; y.len()],
        inv_cov_diag: uniform_vec(y.len(), 9).iter().map(|u| u + 0.5).collect(),
        log_data: y,
    };
    assert!(loss_eval(&meas, &a, &x).unwrap() <= 1e-20);
    assert!(norm(&loss_gradient(&meas, &a, &x).unwrap()) <= 1e-10);
}

#[test]
fn sqrt_hessian_normal_operator_matches_dense() {
    let a = system(8, 2, 2, 10);
    let meas = measurement(&a, 11);
    let b = sqrt_hessian(&meas, a.clone()).unwrap();
    let am = materialize(&a);
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&meas.inv_cov_diag));
    let dense = am.transpose() * w * &am;
    let v = gaussian_vec(a.cols(), 12);
    let btbv = b.adjoint(&b.apply(&v).unwrap()).unwrap();
    let expected = dense * DVector::from_column_slice(&v);
    assert!(rel_diff(&btbv, expected.as_slice()) <= 1e-10);
}

#[test]
fn noiseless_linearization_error_is_small_at_high_counts() {
    let base = bundled_data_dir().join("..");
    let overrides = ["noise.seed=null".to_string(), "noise.i0=1e5".into(), "noise.refinement=1".into()];
    let cfg = RunConfig::from_json("{}", &overrides, &base).unwrap();
    let exp = Experiment::new(cfg).unwrap();
    let counts = exp.simulate().unwrap();
    assert!(counts.iter().cloned().fold(f64::INFINITY, f64::min) >= 1e4);
    let meas = log_linearize(&exp.bin_flux, &counts).unwrap();
    let (a, _) = exp.system();
    let ax = a.apply(&exp.truth).unwrap();
    let err = rel_diff(&meas.log_data, &ax);
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn desk_counts_are_positive_at_nominal_flux() {
    let cfg = RunConfig::from_json("{}", &[], &bundled_data_dir().join("..")).unwrap();
    let exp = Experiment::new(cfg).unwrap();
    let counts = exp.simulate().unwrap();
    assert!(counts.iter().all(|&p| p >= 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_convex_along_lines(seed in 0u64..10_000, t in 0.01f64..2.0) {
        let a = system(6, 2, 2, seed % 5);
        let meas = measurement(&a, seed);
        let x = uniform_vec(a.cols(), seed + 1);
        let v = gaussian_vec(a.cols(), seed + 2);
        let at = |s: f64| {
            let p: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi + s * vi).collect();
            loss_eval(&meas, &a, &p).unwrap()
        };
        let second = at(t) - 2.0 * at(0.0) + at(-t);
        prop_assert!(second >= -1e-9 * at(0.0).abs().max(1.0));
    }

    #[test]
    fn data_hessian_is_psd(seed in 0u64..10_000) {
        let a = system(6, 2, 2, seed % 5);
        let b = sqrt_hessian(&measurement(&a, seed), a).unwrap();
        let v = gaussian_vec(b.cols(), seed);
        let bv = b.apply(&v).unwrap();
        prop_assert!(dot(&bv, &bv) >= 0.0);
        prop_assert!((dot(&bv, &bv) - dot(&v, &b.adjoint(&bv).unwrap())).abs() <= 1e-9 * dot(&bv, &bv).max(1.0));
    }
}
