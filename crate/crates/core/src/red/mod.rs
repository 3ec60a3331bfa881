//! Regularization by denoising.
//!
//! `ρ(x) = (1/2ν) xᵀ(x − D(x))` with gradient `(1/ν)(x − D(x))` and Hessian
//! action `(1/ν)(p − J[D(x)] p)`. Jacobian-vector products come from the
//! denoiser when it knows them exactly, otherwise from one forward
//! difference.

pub mod denoisers;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf};

pub use denoisers::{BlurSoftThreshold, DenoiserSpec, GaussianBlur, Identity, PatchMean};

/// A denoiser `D_σ : Rⁿ → Rⁿ`. Implementations hold no mutable state, so
/// they can be called from several threads.
pub trait Denoiser: Send + Sync {
    fn apply(&self, x: &[f64]) -> Vec<f64>;

    /// `J[D(x)] p` when known in closed form.
    fn exact_jvp(&self, _x: &[f64], _p: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn name(&self) -> &str;
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (**self).apply(x)
    }
    fn exact_jvp(&self, x: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        (**self).exact_jvp(x, p)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (**self).apply(x)
    }
    fn exact_jvp(&self, x: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        (**self).exact_jvp(x, p)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Counts denoiser evaluations (applies plus exact JVPs).
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    inner: D,
    applies: AtomicU64,
    jvps: AtomicU64,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            applies: AtomicU64::new(0),
            jvps: AtomicU64::new(0),
        }
    }

    pub fn applies(&self) -> u64 {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn jvps(&self) -> u64 {
        self.jvps.load(Ordering::Relaxed)
    }

    pub fn calls(&self) -> u64 {
        self.applies() + self.jvps()
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.applies.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(x)
    }

    fn exact_jvp(&self, x: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        let out = self.inner.exact_jvp(x, p);
        if out.is_some() {
            self.jvps.fetch_add(1, Ordering::Relaxed);
        }
        out
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// RED weight and estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedConfig {
    /// Regularizer weight `ν` (the regularizer is scaled by `1/ν`).
    pub nu: f64,
    /// Relative finite-difference step for Jacobian-vector products.
    pub fd_epsilon_scale: f64,
    /// Gaussian probes `K` for the Jacobian trace.
    pub mc_probes: usize,
}

impl Default for RedConfig {
    fn default() -> Self {
        Self {
            nu: 1.0,
            fd_epsilon_scale: 1e-6,
            mc_probes: 1,
        }
    }
}

impl RedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(Error::Parameter(format!("nu must be positive, got {}", self.nu)));
        }
        if !(self.fd_epsilon_scale > 0.0 && self.fd_epsilon_scale.is_finite()) {
            return Err(Error::Parameter("fd_epsilon_scale must be positive".into()));
        }
        if self.mc_probes == 0 {
            return Err(Error::Parameter("mc_probes must be at least 1".into()));
        }
        Ok(())
    }
}

/// `ε = scale · (1 + ‖x‖∞) / max(‖p‖∞, tiny)`.
pub fn fd_epsilon(cfg: &RedConfig, x: &[f64], p: &[f64]) -> f64 {
    cfg.fd_epsilon_scale * (1.0 + norm_inf(x)) / norm_inf(p).max(f64::MIN_POSITIVE)
}

/// `ρ(x) = (1/2ν) xᵀ(x − D(x))`.
pub fn red_value(den: &dyn Denoiser, cfg: &RedConfig, x: &[f64]) -> f64 {
    value_from(cfg, x, &den.apply(x))
}

fn value_from(cfg: &RedConfig, x: &[f64], dx: &[f64]) -> f64 {
    x.iter().zip(dx).map(|(a, d)| a * (a - d)).sum::<f64>() / (2.0 * cfg.nu)
}

/// `∇ρ(x) = (1/ν)(x − D(x))`.
pub fn red_gradient(den: &dyn Denoiser, cfg: &RedConfig, x: &[f64]) -> Vec<f64> {
    gradient_from(cfg, x, &den.apply(x))
}

fn gradient_from(cfg: &RedConfig, x: &[f64], dx: &[f64]) -> Vec<f64> {
    x.iter().zip(dx).map(|(a, d)| (a - d) / cfg.nu).collect()
}

/// `J[D(x)] p ≈ (D(x + εp) − D(x)) / ε`; zero without evaluating `D` when
/// `p = 0`.
pub fn jvp_fd(den: &dyn Denoiser, cfg: &RedConfig, x: &[f64], p: &[f64]) -> Vec<f64> {
    if norm_inf(p) == 0.0 {
        return vec![0.0; p.len()];
    }
    jvp_fd_from(den, cfg, x, &den.apply(x), p)
}

fn jvp_fd_from(den: &dyn Denoiser, cfg: &RedConfig, x: &[f64], dx: &[f64], p: &[f64]) -> Vec<f64> {
    if norm_inf(p) == 0.0 {
        return vec![0.0; p.len()];
    }
    let eps = fd_epsilon(cfg, x, p);
    let shifted: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + eps * b).collect();
    den.apply(&shifted)
        .iter()
        .zip(dx)
        .map(|(a, b)| (a - b) / eps)
        .collect()
}

/// `(1/ν)(p − J[D(x)] p)`.
pub fn reg_hessian_action(den: &dyn Denoiser, cfg: &RedConfig, x: &[f64], p: &[f64]) -> Vec<f64> {
    RedLinearization::new(den, cfg, x).hessian_action(p)
}

/// `(1/K) Σ_k n_kᵀ (D(x + ε n_k) − D(x)) / ε` with Gaussian probes `n_k`.
/// Probe `k` draws from stream `k` of a generator seeded with `seed`.
pub fn trace_mc(den: &dyn Denoiser, cfg: &RedConfig, x: &[f64], seed: u64) -> f64 {
    RedLinearization::new(den, cfg, x).trace(seed)
}

/// `λ = max(0, (1/ν)(1 − tr(J)/n))`, the mean diagonal of the regularizer
/// Hessian, with `tr(J)/n` from the probes of [`trace_mc`].
pub fn ridge_penalty_scalar(den: &dyn Denoiser, cfg: &RedConfig, x: &[f64], seed: u64) -> f64 {
    RedLinearization::new(den, cfg, x).ridge(seed)
}

/// The regularizer around a fixed point `x`, with `D(x)` evaluated once.
pub struct RedLinearization<'a> {
    den: &'a dyn Denoiser,
    cfg: &'a RedConfig,
    x: &'a [f64],
    dx: Vec<f64>,
}

impl<'a> RedLinearization<'a> {
    pub fn new(den: &'a dyn Denoiser, cfg: &'a RedConfig, x: &'a [f64]) -> Self {
        Self {
            dx: den.apply(x),
            den,
            cfg,
            x,
        }
    }

    /// Reuse a known `D(x)`.
    pub fn with_denoised(den: &'a dyn Denoiser, cfg: &'a RedConfig, x: &'a [f64], dx: Vec<f64>) -> Self {
        assert_eq!(x.len(), dx.len(), "denoised image length");
        Self { den, cfg, x, dx }
    }

    pub fn denoised(&self) -> &[f64] {
        &self.dx
    }

    pub fn value(&self) -> f64 {
        value_from(self.cfg, self.x, &self.dx)
    }

    pub fn gradient(&self) -> Vec<f64> {
        gradient_from(self.cfg, self.x, &self.dx)
    }

    /// `J[D(x)] p`, exact when the denoiser provides it.
    pub fn jvp(&self, p: &[f64]) -> Vec<f64> {
        if norm_inf(p) == 0.0 {
            return vec![0.0; p.len()];
        }
        match self.den.exact_jvp(self.x, p) {
            Some(j) => j,
            None => jvp_fd_from(self.den, self.cfg, self.x, &self.dx, p),
        }
    }

    pub fn hessian_action(&self, p: &[f64]) -> Vec<f64> {
        let j = self.jvp(p);
        p.iter().zip(&j).map(|(a, b)| (a - b) / self.cfg.nu).collect()
    }

    pub fn trace(&self, seed: u64) -> f64 {
        self.probe_sums(seed).0 / self.cfg.mc_probes as f64
    }

    /// `Σ_k n_kᵀ J n_k` and `Σ_k n_kᵀ n_k` over the probes of `seed`.
    fn probe_sums(&self, seed: u64) -> (f64, f64) {
        let n = self.x.len();
        let terms: Vec<(f64, f64)> = (0..self.cfg.mc_probes)
            .into_par_iter()
            .map(|k| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let probe: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let jn = jvp_fd_from(self.den, self.cfg, self.x, &self.dx, &probe);
                (dot(&probe, &jn), dot(&probe, &probe))
            })
            .collect();
        terms.iter().fold((0.0, 0.0), |(a, b), (t, q)| (a + t, b + q))
    }

    /// The mean Jacobian diagonal is estimated as `Σ nᵀJn / Σ nᵀn` over the
    /// same probes, which is exact whenever `J` is a multiple of `I`.
    pub fn ridge(&self, seed: u64) -> f64 {
        let (t, q) = self.probe_sums(seed);
        if q == 0.0 {
            return 0.0;
        }
        ((1.0 - t / q) / self.cfg.nu).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_diff;
    use rand::Rng;

    struct Zero;
    impl Denoiser for Zero {
        fn apply(&self, x: &[f64]) -> Vec<f64> {
            vec![0.0; x.len()]
        }
        fn name(&self) -> &str {
            "zero"
        }
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn cfg(nu: f64, probes: usize) -> RedConfig {
        RedConfig {
            nu,
            mc_probes: probes,
            ..RedConfig::default()
        }
    }

    #[test]
    fn identity_and_zero_gradients() {
        let x = random(16, 1);
        assert!(red_gradient(&Identity, &cfg(1.0, 1), &x).iter().all(|&v| v == 0.0));
        let g = red_gradient(&Zero, &cfg(2.0, 1), &x);
        assert_eq!(g, x.iter().map(|v| v / 2.0).collect::<Vec<_>>());
    }

    #[test]
    fn jvp_of_zero_direction_skips_denoiser() {
        let d = CountingDenoiser::new(Identity);
        let j = jvp_fd(&d, &cfg(1.0, 1), &[1.0, 2.0], &[0.0, 0.0]);
        assert_eq!(j, vec![0.0, 0.0]);
        assert_eq!(d.calls(), 0);
    }

    #[test]
    fn jvp_fd_exact_for_linear_denoiser() {
        let b = GaussianBlur::new(8, 1.2).unwrap();
        let x = random(64, 2);
        let p = random(64, 3);
        let fd = jvp_fd(&b, &cfg(1.0, 1), &x, &p);
        assert!(rel_diff(&fd, &b.apply(&p)) < 1e-8);
        let id = jvp_fd(&Identity, &cfg(1.0, 1), &x, &p);
        assert!(rel_diff(&id, &p) < 1e-8);
    }

    #[test]
    fn hessian_action_limits() {
        let x = random(9, 4);
        let p = random(9, 5);
        assert!(reg_hessian_action(&Identity, &cfg(1.0, 1), &x, &p).iter().all(|&v| v == 0.0));
        let z = reg_hessian_action(&Zero, &cfg(1.0, 1), &x, &p);
        assert!(rel_diff(&z, &p) < 1e-12);
    }

    #[test]
    fn ridge_limits() {
        let x = random(64, 6);
        assert_eq!(ridge_penalty_scalar(&Identity, &cfg(1.0, 4), &x, 1), 0.0);
        assert!((ridge_penalty_scalar(&Zero, &cfg(1.0, 4), &x, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trace_is_reproducible_per_seed() {
        let b = GaussianBlur::new(16, 1.0).unwrap();
        let x = random(256, 7);
        let c = cfg(1.0, 8);
        assert_eq!(trace_mc(&b, &c, &x, 3), trace_mc(&b, &c, &x, 3));
        assert_ne!(trace_mc(&b, &c, &x, 3), trace_mc(&b, &c, &x, 4));
    }

    #[test]
    fn linearization_calls_denoiser_once_per_action() {
        let d = CountingDenoiser::new(BlurSoftThreshold::new(8, 1.0, 0.05, 0.1).unwrap());
        let c = cfg(1.0, 1);
        let x = random(64, 8);
        let lin = RedLinearization::new(&d, &c, &x);
        let _ = lin.gradient();
        for s in 0..5 {
            let _ = lin.hessian_action(&random(64, 20 + s));
        }
        assert_eq!(d.calls(), 6);
    }
}
