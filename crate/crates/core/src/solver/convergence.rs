use serde::{Deserialize, Serialize};

use super::SolveResult;
use crate::error::{Error, Result};

/// Empirical rate summary of an error sequence `e_t = ‖x_t − x*‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `e_{t+1} / e_t` for every consecutive pair with `e_t > 0`.
    pub ratios: Vec<f64>,
    /// Geometric mean of the ratios.
    pub linear_rate: f64,
    /// Smallest non-negative `C₁` (quadratic) and `C₂ + C₃` (linear)
    /// constants of an envelope `e_{t+1} ≤ C₁ e_t² + (C₂+C₃) e_t`, chosen to
    /// minimize the envelope summed over the sequence.
    pub c_quadratic: f64,
    pub c_linear: f64,
    pub envelope_holds: bool,
    /// Every ratio is below one.
    pub contracting: bool,
}

/// Fit the envelope constants on an error sequence. The fit is a
/// two-variable linear program; its optimum lies on a vertex, so the
/// candidates are the single-constant fits and the pairwise intersections
/// of active constraints.
pub fn convergence_check(errors: &[f64]) -> Result<ConvergenceReport> {
    if errors.len() < 2 {
        return Err(Error::Parameter("need at least two errors".into()));
    }
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::Parameter("errors must be finite and non-negative".into()));
    }
    let pairs: Vec<(f64, f64)> = errors
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| (w[0], w[1]))
        .collect();
    let ratios: Vec<f64> = pairs.iter().map(|(a, b)| b / a).collect();
    let linear_rate = if ratios.is_empty() || ratios.contains(&0.0) {
        0.0
    } else {
        (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
    };

    let feasible = |c1: f64, c2: f64| {
        c1 >= 0.0 && c2 >= 0.0 && pairs.iter().all(|&(e, n)| n <= (c1 * e * e + c2 * e) * (1.0 + 1e-12) + 1e-300)
    };
    let objective = |c1: f64, c2: f64| pairs.iter().map(|&(e, _)| c1 * e * e + c2 * e).sum::<f64>();
    let mut candidates = vec![
        (0.0, pairs.iter().map(|(e, n)| n / e).fold(0.0, f64::max)),
        (pairs.iter().map(|(e, n)| n / (e * e)).fold(0.0, f64::max), 0.0),
    ];
    for (i, &(e1, n1)) in pairs.iter().enumerate() {
        for &(e2, n2) in &pairs[i + 1..] {
            let det = e1 * e1 * e2 - e2 * e2 * e1;
            if det.abs() > 1e-300 {
                let c1 = (n1 * e2 - n2 * e1) / det;
                let c2 = (e1 * e1 * n2 - e2 * e2 * n1) / det;
                candidates.push((c1, c2));
            }
        }
    }
    let (c_quadratic, c_linear) = candidates
        .into_iter()
        .filter(|&(a, b)| feasible(a, b))
        .min_by(|a, b| objective(a.0, a.1).total_cmp(&objective(b.0, b.1)))
        .unwrap_or((0.0, f64::INFINITY));
    Ok(ConvergenceReport {
        contracting: ratios.iter().all(|&r| r < 1.0),
        envelope_holds: feasible(c_quadratic, c_linear),
        ratios,
        linear_rate,
        c_quadratic,
        c_linear,
    })
}

impl SolveResult {
    /// RMSE-vs-truth sequence (iteration 0 first), if truth was supplied.
    pub fn error_sequence(&self) -> Option<Vec<f64>> {
        std::iter::once(&self.initial)
            .chain(&self.records)
            .map(|r| r.rmse)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_convergence() {
        let r = convergence_check(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.linear_rate, 0.0);
        assert!(r.contracting);
    }

    #[test]
    fn quadratic_sequence_fits_quadratic_constant() {
        let mut e = vec![0.2];
        for _ in 0..4 {
            let last = *e.last().unwrap();
            e.push(2.0 * last * last);
        }
        let r = convergence_check(&e).unwrap();
        assert!(r.envelope_holds);
        assert!((r.c_quadratic - 2.0).abs() < 1e-9, "{r:?}");
        assert!(r.c_linear < 1e-9);
    }

    #[test]
    fn linear_sequence_fits_linear_constant() {
        let e: Vec<f64> = (0..6).map(|t| 0.5f64.powi(t)).collect();
        let r = convergence_check(&e).unwrap();
        assert!((r.linear_rate - 0.5).abs() < 1e-12);
        assert!((r.c_linear - 0.5).abs() < 1e-9 && r.c_quadratic < 1e-9);
    }
}
