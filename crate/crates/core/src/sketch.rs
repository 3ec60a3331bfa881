//! Ridge leverage scores, block sampling and the row sketch `G = S B`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{BlockOperator, FourierRadon, GramFft, LinearMap, RadonGeometry, ViewOperator};

/// `l_i = Σ_j σ_j² / (σ_j² + λ) · u_ij²` from the thin SVD of `b`. Singular
/// values below rounding level are treated as zero (pseudo-inverse).
pub fn ridge_scores_exact(b: &DMatrix<f64>, lambda: f64) -> Vec<f64> {
    let (m, n) = b.shape();
    if m == 0 || n == 0 {
        return vec![0.0; m];
    }
    let svd = b.clone().svd(true, false);
    let u = svd.u.expect("svd with u");
    let cut = svd.singular_values.max() * m.max(n) as f64 * f64::EPSILON;
    let mut scores = vec![0.0; m];
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s <= cut {
            continue;
        }
        let f = s * s / (s * s + lambda);
        for (i, l) in scores.iter_mut().enumerate() {
            *l += f * u[(i, j)] * u[(i, j)];
        }
    }
    scores
}

/// `n_eff = Σ_j σ_j² / (σ_j² + λ)`.
pub fn effective_dimension(b: &DMatrix<f64>, lambda: f64) -> f64 {
    if b.is_empty() {
        return 0.0;
    }
    let s = b.singular_values();
    let cut = s.max() * b.nrows().max(b.ncols()) as f64 * f64::EPSILON;
    s.iter()
        .filter(|&&v| v > cut)
        .map(|v| v * v / (v * v + lambda))
        .sum()
}

/// Per-block leverage scores with the ridge they were computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScores {
    pub per_block: Vec<f64>,
    pub ridge: f64,
    pub block_size: usize,
}

impl BlockScores {
    pub fn total(&self) -> f64 {
        self.per_block.iter().sum()
    }

    /// `p_i = l_i / Σ l`, uniform when every score is zero.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total();
        let n = self.per_block.len();
        if total > 0.0 {
            self.per_block.iter().map(|l| l / total).collect()
        } else {
            vec![1.0 / n as f64; n]
        }
    }
}

/// Sums of contiguous runs of `block_size` row scores.
pub fn block_scores(row_scores: &[f64], block_size: usize, ridge: f64) -> Result<BlockScores> {
    if block_size == 0 || !row_scores.len().is_multiple_of(block_size) {
        return Err(Error::Parameter(format!(
            "{} row scores do not split into blocks of {block_size}",
            row_scores.len()
        )));
    }
    Ok(BlockScores {
        per_block: row_scores.chunks_exact(block_size).map(|c| c.iter().sum()).collect(),
        ridge,
        block_size,
    })
}

/// Block sums following the row layout of a [`BlockOperator`] (for the
/// spectral operator a block collects one view across all bins).
pub fn block_scores_of<B: BlockOperator + ?Sized>(op: &B, row_scores: &[f64], ridge: f64) -> Result<BlockScores> {
    crate::error::check_len("row scores", op.rows(), row_scores.len())?;
    Ok(BlockScores {
        per_block: (0..op.n_blocks())
            .map(|b| op.rows_of_block(b).iter().map(|&r| row_scores[r]).sum())
            .collect(),
        ridge,
        block_size: op.block_rows(),
    })
}

/// `⌈4 Σl · ln(4 n / (δ ε²))⌉`.
pub fn min_sketch_size(sum_block_scores: f64, n_cols: usize, delta: f64, epsilon: f64) -> Result<usize> {
    if !(delta > 0.0 && delta < 1.0 && epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Parameter(format!(
            "delta and epsilon must lie in (0, 1), got {delta}, {epsilon}"
        )));
    }
    if !(sum_block_scores >= 0.0) {
        return Err(Error::Parameter("score sum must be non-negative".into()));
    }
    let s = 4.0 * sum_block_scores * (4.0 * n_cols as f64 / (delta * epsilon * epsilon)).ln();
    Ok(s.ceil().max(0.0) as usize)
}

/// Sampled blocks of one sketch. Each distinct block carries the weight
/// `√(mult / (s · p_i))`, so stacking it once is equivalent to stacking
/// `mult` copies with the per-draw weight `1/√(s · p_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchPlan {
    pub blocks: Vec<usize>,
    pub multiplicity: Vec<usize>,
    pub weights: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub s_blocks: usize,
}

impl SketchPlan {
    /// Every block once with unit weight (the unsketched operator).
    pub fn full(n_blocks: usize) -> Self {
        Self {
            blocks: (0..n_blocks).collect(),
            multiplicity: vec![1; n_blocks],
            weights: vec![1.0; n_blocks],
            probabilities: vec![1.0 / n_blocks as f64; n_blocks],
            s_blocks: n_blocks,
        }
    }

    /// `(view, multiplicity)` pairs in increasing view order.
    pub fn sampled_blocks(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().copied().zip(self.multiplicity.iter().copied()).collect()
    }

    /// Per-draw weight `1/√(s · p_i)` of each distinct sampled block.
    pub fn rescale(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|&b| 1.0 / (self.s_blocks as f64 * self.probabilities[b]).sqrt())
            .collect()
    }

    /// Draw count per block, zero for blocks never sampled.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.probabilities.len()];
        for (&b, &m) in self.blocks.iter().zip(&self.multiplicity) {
            h[b] = m;
        }
        h
    }
}

/// Draw `s_blocks` blocks i.i.d. with replacement from `p_i = l_i / Σl`.
pub fn draw_sketch(scores: &BlockScores, s_blocks: usize, seed: u64) -> Result<SketchPlan> {
    if s_blocks == 0 {
        return Err(Error::Parameter("s_blocks must be at least 1".into()));
    }
    if scores.per_block.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Parameter("block scores must be finite and non-negative".into()));
    }
    let probabilities = scores.probabilities();
    let dist = WeightedIndex::new(&probabilities).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut counts = BTreeMap::new();
    for _ in 0..s_blocks {
        *counts.entry(dist.sample(&mut rng)).or_insert(0usize) += 1;
    }
    let (blocks, multiplicity): (Vec<usize>, Vec<usize>) = counts.into_iter().unzip();
    let weights = blocks
        .iter()
        .zip(&multiplicity)
        .map(|(&b, &m)| (m as f64 / (s_blocks as f64 * probabilities[b])).sqrt())
        .collect();
    Ok(SketchPlan {
        blocks,
        multiplicity,
        weights,
        probabilities,
        s_blocks,
    })
}

/// `G = S B`: only the sampled blocks of `B`, each scaled by its weight.
/// Output rows follow [`BlockOperator::apply_blocks`] for `plan.blocks`.
pub struct SketchedOperator<'a, B: ?Sized> {
    op: &'a B,
    plan: &'a SketchPlan,
}

impl<'a, B: BlockOperator + ?Sized> SketchedOperator<'a, B> {
    pub fn new(op: &'a B, plan: &'a SketchPlan) -> Result<Self> {
        if let Some(&b) = plan.blocks.iter().find(|&&b| b >= op.n_blocks()) {
            return Err(Error::Parameter(format!(
                "sketch block {b} out of range for {} blocks",
                op.n_blocks()
            )));
        }
        Ok(Self { op, plan })
    }

    fn scale_rows(&self, v: &mut [f64]) {
        let sr = self.op.segment_rows();
        let k = self.plan.blocks.len();
        for (row, val) in v.iter_mut().enumerate() {
            *val *= self.plan.weights[(row / sr) % k];
        }
    }

    /// `Gᵀ G v`.
    pub fn normal_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.rows()];
        self.apply_into(v, &mut z);
        let mut out = vec![0.0; self.cols()];
        self.adjoint_into(&z, &mut out);
        out
    }
}

impl<B: BlockOperator + ?Sized> LinearMap for SketchedOperator<'_, B> {
    fn rows(&self) -> usize {
        self.plan.blocks.len() * self.op.block_rows()
    }

    fn cols(&self) -> usize {
        self.op.cols()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.op.apply_blocks(x, &self.plan.blocks, y);
        self.scale_rows(y);
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let mut scaled = y.to_vec();
        self.scale_rows(&mut scaled);
        self.op.adjoint_blocks(&scaled, &self.plan.blocks, x);
    }
}

/// `G v` for the sampled views of `b`.
pub fn sketched_sqrt_apply<B: BlockOperator + ?Sized>(plan: &SketchPlan, b: &B, v: &[f64]) -> Result<Vec<f64>> {
    SketchedOperator::new(b, plan)?.apply(v)
}

/// Per-bin mean of the inverse covariance (bin-major measurements).
pub fn bin_mean_weights(inv_cov_diag: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if n_bins == 0 || !inv_cov_diag.len().is_multiple_of(n_bins) {
        return Err(Error::Dimension {
            context: "inverse covariance per bin",
            expected: n_bins * (inv_cov_diag.len() / n_bins.max(1)),
            actual: inv_cov_diag.len(),
        });
    }
    let per = inv_cov_diag.len() / n_bins;
    Ok(inv_cov_diag.chunks_exact(per).map(|c| c.iter().sum::<f64>() / per as f64).collect())
}

/// Block scores of `B = W^{1/2} (C ⊗ R)` under the Kronecker-circulant
/// surrogate `BᵀB ≈ (Cᵀ W̄ C) ⊗ G`, with `G` the circulant Gram of `R` and
/// `W̄` the per-bin mean weight.
///
/// With `Cᵀ W̄ C = V diag(μ) Vᵀ` the score of view `θ` separates into
/// `Σ_k μ_k tr(R_θ (μ_k G + λ)⁻¹ R_θᵀ)`. Each trace is a Hutchinson
/// estimate over Gaussian detector probes `z`: `‖(μ_k G + λ)^{-1/2} R_θᵀ z‖²`
/// evaluated by Parseval on the padded Fourier grid. Only the power
/// spectra of the back-projected probes depend on the geometry, so they are
/// computed once here; every [`ScoreEstimator::estimate`] is then a cheap
/// weighted sum. `G` is radial, so the spectra are stored per distinct
/// squared radius.
#[derive(Debug, Clone)]
pub struct ScoreEstimator {
    n_pixels: usize,
    n_detectors: usize,
    pad: usize,
    class_gain: Vec<f64>,
    class_count: Vec<f64>,
    view_power: Vec<Vec<f64>>,
}

impl ScoreEstimator {
    pub const DEFAULT_PROBES: usize = 16;

    pub fn new(geom: &RadonGeometry, probes: usize, seed: u64) -> Result<Self> {
        geom.validate()?;
        if probes == 0 {
            return Err(Error::Parameter("score estimation needs at least one probe".into()));
        }
        let radon = FourierRadon::new(geom.clone());
        let gram = GramFft::new(geom);
        let pad = gram.padded_side();
        let fold = |k: usize| if k <= pad / 2 { k as i64 } else { k as i64 - pad as i64 };
        let mut class_of_r2 = BTreeMap::new();
        let mut class_index = Vec::with_capacity(pad * pad);
        for ky in 0..pad {
            for kx in 0..pad {
                let r2 = fold(kx).pow(2) + fold(ky).pow(2);
                let next = class_of_r2.len();
                class_index.push(*class_of_r2.entry(r2).or_insert(next));
            }
        }
        let n_classes = class_of_r2.len();
        let mut class_gain = vec![0.0; n_classes];
        let mut class_count = vec![0.0; n_classes];
        for (f, &c) in class_index.iter().enumerate() {
            class_gain[c] = gram.multiplier()[f];
            class_count[c] += 1.0;
        }

        let nd = geom.n_detectors;
        let probe_vecs: Vec<Vec<f64>> = (0..probes)
            .map(|k| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                (0..nd).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
            .collect();
        let view_power = (0..geom.n_views())
            .into_par_iter()
            .map(|v| {
                let mut power = vec![0.0; n_classes];
                let mut image = vec![0.0; geom.n_pixels()];
                for z in &probe_vecs {
                    radon.adjoint_views(z, &[v], &mut image);
                    for (f, s) in gram.spectrum(&image).iter().enumerate() {
                        power[class_index[f]] += s.norm_sqr();
                    }
                }
                power.iter_mut().for_each(|p| *p /= probes as f64);
                power
            })
            .collect();
        Ok(Self {
            n_pixels: geom.n_pixels(),
            n_detectors: nd,
            pad,
            class_gain,
            class_count,
            view_power,
        })
    }

    pub fn n_views(&self) -> usize {
        self.view_power.len()
    }

    /// Surrogate block scores for mixing matrix `c` (`N_b × N_m`), per-bin
    /// weights `bin_weights` and ridge `lambda`. Scores are clamped at zero
    /// and rescaled to sum to the surrogate's effective dimension.
    pub fn estimate(&self, c: &DMatrix<f64>, bin_weights: &[f64], lambda: f64) -> Result<BlockScores> {
        crate::error::check_len("bin weights", c.nrows(), bin_weights.len())?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!("ridge must be non-negative, got {lambda}")));
        }
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(bin_weights));
        let k = c.transpose() * w * c;
        let mu: Vec<f64> = SymmetricEigen::new(k)
            .eigenvalues
            .iter()
            .map(|&m| m.max(0.0))
            .filter(|&m| m > 0.0)
            .collect();
        let inv = |m: f64, g: f64| {
            let d = m * g + lambda;
            if d > 0.0 {
                1.0 / d
            } else {
                0.0
            }
        };
        let norm = 1.0 / (self.pad * self.pad) as f64;
        let mut per_block: Vec<f64> = self
            .view_power
            .iter()
            .map(|power| {
                let s: f64 = mu
                    .iter()
                    .map(|&m| {
                        m * power
                            .iter()
                            .zip(&self.class_gain)
                            .map(|(p, &g)| p * inv(m, g))
                            .sum::<f64>()
                    })
                    .sum();
                (s * norm).max(0.0)
            })
            .collect();
        let n_eff: f64 = mu
            .iter()
            .map(|&m| {
                self.class_gain
                    .iter()
                    .zip(&self.class_count)
                    .map(|(&g, &cnt)| cnt * m * g * inv(m, g))
                    .sum::<f64>()
            })
            .sum::<f64>()
            * self.n_pixels as f64
            * norm;
        let total: f64 = per_block.iter().sum();
        if total > 0.0 {
            per_block.iter_mut().for_each(|l| *l *= n_eff / total);
        }
        Ok(BlockScores {
            per_block,
            ridge: lambda,
            block_size: c.nrows() * self.n_detectors,
        })
    }
}

/// One-shot surrogate score estimate; see [`ScoreEstimator`].
pub fn estimate_block_scores_fft(
    geom: &RadonGeometry,
    c: &DMatrix<f64>,
    inv_cov_diag: &[f64],
    lambda: f64,
    probes: usize,
    seed: u64,
) -> Result<BlockScores> {
    let weights = bin_mean_weights(inv_cov_diag, c.nrows())?;
    ScoreEstimator::new(geom, probes, seed)?.estimate(c, &weights, lambda)
}

/// Total-variation distance `½ Σ |p_i − q_i|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distribution lengths");
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::DenseBlocks;
    use rand::Rng;

    fn random_matrix(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_scores() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(ridge_scores_exact(&i2, 0.0), vec![1.0, 1.0]);
        let half = ridge_scores_exact(&i2, 1.0);
        assert!(half.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn scores_match_regularized_solve() {
        let b = random_matrix(6, 3, 1);
        let lambda = 0.3;
        let m = b.transpose() * &b + DMatrix::identity(3, 3) * lambda;
        let minv = m.try_inverse().unwrap();
        let scores = ridge_scores_exact(&b, lambda);
        for (i, s) in scores.iter().enumerate() {
            let a = b.row(i).transpose();
            let direct = (a.transpose() * &minv * &a)[(0, 0)];
            assert!((s - direct).abs() < 1e-10);
        }
        let total: f64 = scores.iter().sum();
        assert!((total - effective_dimension(&b, lambda)).abs() < 1e-10);
    }

    #[test]
    fn effective_dimension_closed_form() {
        let mut b = DMatrix::zeros(3, 2);
        b[(0, 0)] = 2.0;
        b[(1, 1)] = 1.0;
        assert!((effective_dimension(&b, 1.0) - 1.3).abs() < 1e-12);
        assert!((effective_dimension(&random_matrix(8, 4, 2), 0.0) - 4.0).abs() < 1e-10);
        assert!(effective_dimension(&random_matrix(8, 4, 2), 1e12) < 1e-9);
    }

    #[test]
    fn contiguous_block_sums() {
        let bs = block_scores(&[0.5, 0.5, 0.3, 0.7], 2, 0.0).unwrap();
        assert_eq!(bs.per_block, vec![1.0, 1.0]);
        assert!(block_scores(&[1.0, 2.0, 3.0], 2, 0.0).is_err());
    }

    #[test]
    fn sketch_size_formula() {
        assert_eq!(min_sketch_size(3.0, 16, 0.1, 0.5).unwrap(), 95);
        assert_eq!(min_sketch_size(0.0, 16, 0.1, 0.5).unwrap(), 0);
        assert!(min_sketch_size(3.0, 16, 0.1, 0.25).unwrap() > 95);
        assert!(min_sketch_size(3.0, 16, 1.5, 0.5).is_err());
    }

    #[test]
    fn degenerate_distribution_reproduces_block() {
        let b = DenseBlocks::new(random_matrix(6, 4, 3), 2).unwrap();
        let scores = BlockScores {
            per_block: vec![0.0, 1.0, 0.0],
            ridge: 0.0,
            block_size: 2,
        };
        let plan = draw_sketch(&scores, 5, 9).unwrap();
        assert_eq!(plan.sampled_blocks(), vec![(1, 5)]);
        let v = vec![1.0, -2.0, 0.5, 3.0];
        let g = sketched_sqrt_apply(&plan, &b, &v).unwrap();
        let full = b.apply(&v).unwrap();
        assert!(crate::linalg::rel_diff(&g, &full[2..4]) < 1e-14);
    }

    #[test]
    fn sketch_is_reproducible() {
        let scores = BlockScores {
            per_block: vec![0.2, 1.0, 0.5, 0.1],
            ridge: 0.0,
            block_size: 1,
        };
        assert_eq!(draw_sketch(&scores, 7, 4).unwrap(), draw_sketch(&scores, 7, 4).unwrap());
        let plan = draw_sketch(&scores, 7, 4).unwrap();
        assert_eq!(plan.multiplicity.iter().sum::<usize>(), 7);
        assert!((plan.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_plan_is_the_operator() {
        let b = DenseBlocks::new(random_matrix(6, 4, 5), 3).unwrap();
        let plan = SketchPlan::full(2);
        let v = vec![0.3, -1.0, 2.0, 0.1];
        assert_eq!(sketched_sqrt_apply(&plan, &b, &v).unwrap(), b.apply(&v).unwrap());
    }
}
