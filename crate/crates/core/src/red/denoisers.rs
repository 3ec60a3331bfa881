//! Deterministic denoisers acting channel-wise on stacked square images.

use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::error::{Error, Result};

/// `D(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Denoiser for Identity {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn exact_jvp(&self, _x: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        Some(p.to_vec())
    }

    fn name(&self) -> &str {
        "identity"
    }
}

/// Index of sample `i` of a length-`n` signal under half-sample symmetric
/// reflection (`... x1 x0 | x0 x1 ... x_{n-1} | x_{n-1} x_{n-2} ...`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let k = i.rem_euclid(period);
    (if k < n { k } else { period - 1 - k }) as usize
}

/// Separable symmetric 1-D filter applied along rows then columns of every
/// channel, with reflect padding. Because the taps are symmetric and the
/// reflection is half-sample symmetric, the resulting matrix is symmetric.
#[derive(Debug, Clone)]
struct SeparableFilter {
    side: usize,
    taps: Vec<f64>,
}

impl SeparableFilter {
    fn radius(&self) -> isize {
        (self.taps.len() / 2) as isize
    }

    fn filter_channel(&self, img: &[f64], out: &mut [f64]) {
        let n = self.side;
        let r = self.radius();
        let mut tmp = vec![0.0; n * n];
        for row in 0..n {
            let line = &img[row * n..(row + 1) * n];
            for col in 0..n {
                let mut acc = 0.0;
                for (k, t) in self.taps.iter().enumerate() {
                    acc += t * line[reflect(col as isize + k as isize - r, n)];
                }
                tmp[row * n + col] = acc;
            }
        }
        for col in 0..n {
            for row in 0..n {
                let mut acc = 0.0;
                for (k, t) in self.taps.iter().enumerate() {
                    acc += t * tmp[reflect(row as isize + k as isize - r, n) * n + col];
                }
                out[row * n + col] = acc;
            }
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let px = self.side * self.side;
        assert_eq!(x.len() % px, 0, "denoiser input is not a stack of {0}x{0} images", self.side);
        let mut out = vec![0.0; x.len()];
        for (xi, oi) in x.chunks_exact(px).zip(out.chunks_exact_mut(px)) {
            self.filter_channel(xi, oi);
        }
        out
    }
}

/// Separable Gaussian convolution, truncated at `3σ` and renormalized.
#[derive(Debug, Clone)]
pub struct GaussianBlur {
    filter: SeparableFilter,
    sigma: f64,
}

impl GaussianBlur {
    pub fn new(side: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!("blur sigma must be positive, got {sigma}")));
        }
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut taps: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        Ok(Self {
            filter: SeparableFilter { side, taps },
            sigma,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Normalized 1-D taps, centre at index `len / 2`.
    pub fn taps(&self) -> &[f64] {
        &self.filter.taps
    }
}

impl Denoiser for GaussianBlur {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.filter.apply(x)
    }

    fn exact_jvp(&self, _x: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        Some(self.filter.apply(p))
    }

    fn name(&self) -> &str {
        "gaussian_blur"
    }
}

/// Mean over a `(2r+1) × (2r+1)` patch, reflect padding.
#[derive(Debug, Clone)]
pub struct PatchMean {
    filter: SeparableFilter,
}

impl PatchMean {
    pub fn new(side: usize, radius: usize) -> Self {
        let len = 2 * radius + 1;
        Self {
            filter: SeparableFilter {
                side,
                taps: vec![1.0 / len as f64; len],
            },
        }
    }
}

impl Denoiser for PatchMean {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.filter.apply(x)
    }

    fn exact_jvp(&self, _x: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        Some(self.filter.apply(p))
    }

    fn name(&self) -> &str {
        "patch_mean"
    }
}

/// Gaussian blur followed by the smooth shrinkage
/// `s(u) = u − τ u / √(u² + β²)`, a differentiable stand-in for soft
/// thresholding (`τ ≤ β` keeps it monotone).
#[derive(Debug, Clone)]
pub struct BlurSoftThreshold {
    blur: GaussianBlur,
    tau: f64,
    beta: f64,
}

impl BlurSoftThreshold {
    pub fn new(side: usize, sigma: f64, tau: f64, beta: f64) -> Result<Self> {
        if !(tau >= 0.0 && beta > 0.0 && tau <= beta) {
            return Err(Error::Parameter(format!(
                "soft threshold needs 0 <= tau <= beta and beta > 0, got tau={tau}, beta={beta}"
            )));
        }
        Ok(Self {
            blur: GaussianBlur::new(side, sigma)?,
            tau,
            beta,
        })
    }

    fn shrink(&self, u: f64) -> f64 {
        u - self.tau * u / (u * u + self.beta * self.beta).sqrt()
    }

    fn shrink_slope(&self, u: f64) -> f64 {
        let b2 = self.beta * self.beta;
        1.0 - self.tau * b2 / (u * u + b2).powf(1.5)
    }
}

impl Denoiser for BlurSoftThreshold {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut u = self.blur.apply(x);
        u.iter_mut().for_each(|v| *v = self.shrink(*v));
        u
    }

    fn exact_jvp(&self, x: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        let u = self.blur.apply(x);
        let mut bp = self.blur.apply(p);
        for (b, ui) in bp.iter_mut().zip(&u) {
            *b *= self.shrink_slope(*ui);
        }
        Some(bp)
    }

    fn name(&self) -> &str {
        "blur_soft_threshold"
    }
}

/// Config-level denoiser selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    Identity,
    GaussianBlur { sigma: f64 },
    PatchMean { radius: usize },
    BlurSoftThreshold { sigma: f64, tau: f64, beta: f64 },
}

impl DenoiserSpec {
    pub fn build(&self, side: usize) -> Result<Box<dyn Denoiser>> {
        Ok(match *self {
            Self::Identity => Box::new(Identity),
            Self::GaussianBlur { sigma } => Box::new(GaussianBlur::new(side, sigma)?),
            Self::PatchMean { radius } => Box::new(PatchMean::new(side, radius)),
            Self::BlurSoftThreshold { sigma, tau, beta } => {
                Box::new(BlurSoftThreshold::new(side, sigma, tau, beta)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, rel_diff};
    use rand::{Rng, SeedableRng};

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn reflection_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn blur_preserves_constants_and_is_symmetric() {
        let b = GaussianBlur::new(9, 1.3).unwrap();
        let c = b.apply(&[2.5; 81]);
        assert!(c.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let (u, v) = (random(162, 1), random(162, 2));
        let lhs = dot(&b.apply(&u), &v);
        let rhs = dot(&u, &b.apply(&v));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn patch_mean_is_symmetric() {
        let d = PatchMean::new(7, 2);
        let (u, v) = (random(49, 3), random(49, 4));
        assert!((dot(&d.apply(&u), &v) - dot(&u, &d.apply(&v))).abs() < 1e-12);
    }

    #[test]
    fn channels_are_independent() {
        let b = GaussianBlur::new(6, 1.0).unwrap();
        let mut x = vec![0.0; 72];
        x[40] = 1.0;
        let y = b.apply(&x);
        assert!(y[..36].iter().all(|&v| v == 0.0));
        assert!((y[36..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_threshold_jvp_matches_central_differences() {
        let d = BlurSoftThreshold::new(8, 1.0, 0.1, 0.2).unwrap();
        let x = random(64, 5);
        let p = random(64, 6);
        let eps = 1e-5;
        let xp: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + eps * b).collect();
        let xm: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a - eps * b).collect();
        let fd: Vec<f64> = d.apply(&xp).iter().zip(d.apply(&xm)).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let exact = d.exact_jvp(&x, &p).unwrap();
        assert!(rel_diff(&exact, &fd) < 1e-8);
    }

    #[test]
    fn spec_builds_each_denoiser() {
        let specs: Vec<DenoiserSpec> = serde_json::from_str(
            r#"[{"name":"identity"},{"name":"gaussian_blur","sigma":1.0},
                {"name":"patch_mean","radius":1},
                {"name":"blur_soft_threshold","sigma":1.0,"tau":0.01,"beta":0.05}]"#,
        )
        .unwrap();
        let names: Vec<String> = specs.iter().map(|s| s.build(4).unwrap().name().to_string()).collect();
        assert_eq!(names, ["identity", "gaussian_blur", "patch_mean", "blur_soft_threshold"]);
        assert!(DenoiserSpec::GaussianBlur { sigma: 0.0 }.build(4).is_err());
    }
}
