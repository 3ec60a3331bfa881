use super::{denoising_ihs, Problem, Sampling, SolveResult, SolverConfig};
use crate::error::{Error, Result};
use crate::operators::BlockOperator;
use crate::red::{Denoiser, RedConfig};

/// `D(x) = x − β L x` with `L` the 4-neighbour graph Laplacian of each
/// channel (Neumann boundary). As a RED denoiser with `ν = 1` it yields the
/// quadratic smoothness penalty `(β/2) xᵀ L x`.
#[derive(Debug, Clone)]
pub struct LaplacianSmoother {
    side: usize,
    beta: f64,
}

impl LaplacianSmoother {
    pub fn new(side: usize, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!("smoothness must be non-negative, got {beta}")));
        }
        Ok(Self { side, beta })
    }

    fn laplacian(&self, x: &[f64]) -> Vec<f64> {
        let n = self.side;
        let mut out = vec![0.0; x.len()];
        for (xc, oc) in x.chunks_exact(n * n).zip(out.chunks_exact_mut(n * n)) {
            for row in 0..n {
                for col in 0..n {
                    let i = row * n + col;
                    let mut acc = 0.0;
                    if row > 0 {
                        acc += xc[i] - xc[i - n];
                    }
                    if row + 1 < n {
                        acc += xc[i] - xc[i + n];
                    }
                    if col > 0 {
                        acc += xc[i] - xc[i - 1];
                    }
                    if col + 1 < n {
                        acc += xc[i] - xc[i + 1];
                    }
                    oc[i] = acc;
                }
            }
        }
        out
    }
}

impl Denoiser for LaplacianSmoother {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let l = self.laplacian(x);
        x.iter().zip(&l).map(|(a, b)| a - self.beta * b).collect()
    }

    fn exact_jvp(&self, _x: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        Some(self.apply(p))
    }

    fn name(&self) -> &str {
        "laplacian_smoother"
    }
}

/// Projected Newton-CG on `f(x) + (β/2) xᵀ L x` with the full Hessian: the
/// weighted least-squares reference (`β = 0` is unregularized). The
/// denoiser, RED weight and sampling of `problem` are replaced.
pub fn wls_baseline<B: BlockOperator>(
    problem: &Problem<'_, B>,
    image_side: usize,
    smoothness: f64,
    cfg: &SolverConfig,
    x0: &[f64],
) -> Result<SolveResult> {
    let smoother = LaplacianSmoother::new(image_side, smoothness)?;
    let red = RedConfig {
        nu: 1.0,
        ..problem.red.clone()
    };
    let base = Problem {
        data: problem.data,
        denoiser: &smoother,
        red: &red,
        sampling: Sampling::Uniform,
        counter: problem.counter,
        truth: problem.truth,
        n_materials: problem.n_materials,
    };
    let cfg = SolverConfig {
        full_hessian_mode: true,
        ..cfg.clone()
    };
    denoising_ihs(&base, &cfg, x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    #[test]
    fn laplacian_penalty_is_symmetric_and_kills_constants() {
        let s = LaplacianSmoother::new(5, 0.3).unwrap();
        assert!(s.laplacian(&[2.0; 50]).iter().all(|v| v.abs() < 1e-14));
        let u: Vec<f64> = (0..25).map(|i| (i as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..25).map(|i| (i as f64 * 1.3).cos()).collect();
        assert!((dot(&s.laplacian(&u), &v) - dot(&u, &s.laplacian(&v))).abs() < 1e-12);
        assert!(dot(&s.laplacian(&u), &u) >= 0.0);
    }
}
