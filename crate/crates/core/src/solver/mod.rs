//! Sub-sampled Newton-CG with a RED regularizer ("Denoising-IHS").
//!
//! Each outer iteration linearizes the regularizer at `x`, draws a block
//! sketch of the data square-root Hessian `B` from leverage-score estimates,
//! solves `(GᵀG + H_ρ) p = −∇g` by CG and takes a projected step onto
//! `x ≥ 0`, halving the step while the cost increases.

mod baseline;
mod cg;
mod convergence;

pub use baseline::{wls_baseline, LaplacianSmoother};
pub use cg::{cg_solve, cg_solve_observed, CgResult};
pub use convergence::{convergence_check, ConvergenceReport};

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{axpy, norm};
use crate::operators::{BlockOperator, LinearMap, WorkCounter};
use crate::red::{CountingDenoiser, Denoiser, RedConfig, RedLinearization};
use crate::sketch::{
    block_scores_of, draw_sketch, min_sketch_size, ridge_scores_exact, BlockScores, ScoreEstimator,
    SketchPlan, SketchedOperator,
};
use crate::spectral::{sqrt_hessian, SpectralMeasurement, SqrtHessian};

/// The data term `f(x) = ½ ‖B x − t‖²`. For a measurement this is
/// `B = Σ^{-1/2} A`, `t = Σ^{-1/2} y`.
#[derive(Debug, Clone)]
pub struct DataTerm<B> {
    op: B,
    target: Vec<f64>,
}

impl<B: LinearMap> DataTerm<B> {
    pub fn new(op: B, target: Vec<f64>) -> Result<Self> {
        check_len("data term target", op.rows(), target.len())?;
        Ok(Self { op, target })
    }

    pub fn operator(&self) -> &B {
        &self.op
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// `B x − t`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.op.rows()];
        self.op.apply_into(x, &mut r);
        for (ri, ti) in r.iter_mut().zip(&self.target) {
            *ri -= ti;
        }
        r
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        0.5 * norm(&self.residual(x)).powi(2)
    }

    pub fn loss_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let r = self.residual(x);
        let mut g = vec![0.0; self.op.cols()];
        self.op.adjoint_into(&r, &mut g);
        (0.5 * norm(&r).powi(2), g)
    }
}

impl<A: LinearMap> DataTerm<SqrtHessian<A>> {
    pub fn from_measurement(meas: &SpectralMeasurement, a: A) -> Result<Self> {
        let b = sqrt_hessian(meas, a)?;
        let target = b.row_scale().iter().zip(&meas.log_data).map(|(s, y)| s * y).collect();
        Self::new(b, target)
    }
}

/// Where the block sampling distribution comes from.
pub enum Sampling<'a> {
    Uniform,
    /// Kronecker-circulant surrogate for the spectral operator.
    Surrogate {
        estimator: &'a ScoreEstimator,
        mixing: &'a DMatrix<f64>,
        bin_weights: &'a [f64],
    },
    /// Exact ridge scores of a materialized `B` (small problems only).
    Exact(&'a DMatrix<f64>),
}

/// Everything the outer loop needs besides its settings.
pub struct Problem<'a, B> {
    pub data: &'a DataTerm<B>,
    pub denoiser: &'a dyn Denoiser,
    pub red: &'a RedConfig,
    pub sampling: Sampling<'a>,
    /// Projector tally used for the `row_accesses` column.
    pub counter: Option<&'a WorkCounter>,
    pub truth: Option<&'a [f64]>,
    pub n_materials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_outer: usize,
    pub cg_max_iters: usize,
    pub cg_rel_tol: f64,
    /// Sampled views per iteration as a fraction of all views.
    pub subsample_fraction: f64,
    /// Absolute number of draws; overrides `subsample_fraction`.
    pub s_blocks: Option<usize>,
    /// Use the sketch-size bound from `epsilon_embed` / `delta_embed`.
    pub auto_sketch_size: bool,
    pub step_size: f64,
    pub epsilon_embed: f64,
    pub delta_embed: f64,
    pub full_hessian_mode: bool,
    pub max_backtracks: usize,
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub nonnegative: bool,
    /// Bound distance below which a pixel with outward gradient is held at
    /// zero during the Newton solve.
    pub active_set_tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 20,
            cg_max_iters: 30,
            cg_rel_tol: 1e-3,
            subsample_fraction: 1.0 / 3.0,
            s_blocks: None,
            auto_sketch_size: false,
            step_size: 1.0,
            epsilon_embed: 0.5,
            delta_embed: 0.1,
            full_hessian_mode: false,
            max_backtracks: 8,
            plateau_tol: 1e-8,
            plateau_window: 3,
            nonnegative: true,
            active_set_tol: 1e-3,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad("subsample_fraction must lie in (0, 1]");
        }
        if !(self.cg_rel_tol > 0.0) {
            return bad("cg_rel_tol must be positive");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if self.s_blocks == Some(0) {
            return bad("s_blocks must be at least 1");
        }
        if !(self.epsilon_embed > 0.0 && self.epsilon_embed < 1.0) {
            return bad("epsilon_embed must lie in (0, 1)");
        }
        if !(self.delta_embed > 0.0 && self.delta_embed < 1.0) {
            return bad("delta_embed must lie in (0, 1)");
        }
        if !(self.active_set_tol >= 0.0) {
            return bad("active_set_tol must be non-negative");
        }
        if self.plateau_window == 0 {
            return bad("plateau_window must be at least 1");
        }
        Ok(())
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub outer_iter: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub rmse: Option<f64>,
    pub wall_time_s: f64,
    pub row_accesses: u64,
    pub cg_iters: usize,
    pub cg_residual: f64,
    pub sum_block_scores: Option<f64>,
    pub lambda_ridge: f64,
    pub distinct_views: usize,
    pub step: f64,
    pub backtracks: usize,
    pub negative_curvature: bool,
    pub denoiser_calls: u64,
    pub cg_denoiser_calls: u64,
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str =
        "outer_iter,cost,grad_norm,rmse,wall_time_s,row_accesses,cg_iters,sum_block_scores,lambda_ridge";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{:e},{:e},{},{:.6},{},{},{},{:e}",
            self.outer_iter,
            self.cost,
            self.grad_norm,
            opt(self.rmse),
            self.wall_time_s,
            self.row_accesses,
            self.cg_iters,
            opt(self.sum_block_scores),
            self.lambda_ridge
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Cost plateau or zero gradient.
    Converged,
    /// `max_outer` reached.
    BudgetExhausted,
    /// No step size decreased the cost by more than rounding.
    Stalled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub x: Vec<f64>,
    /// The starting point as iteration 0.
    pub initial: IterationRecord,
    pub records: Vec<IterationRecord>,
    pub status: SolveStatus,
}

impl SolveResult {
    pub fn final_cost(&self) -> f64 {
        self.records.last().unwrap_or(&self.initial).cost
    }

    pub fn total_row_accesses(&self) -> u64 {
        self.records.last().unwrap_or(&self.initial).row_accesses
    }

    /// CSV with the header and one line per iteration, starting at 0.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(IterationRecord::CSV_HEADER);
        s.push('\n');
        for r in std::iter::once(&self.initial).chain(&self.records) {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Independent seed for stream `tag` of outer iteration `iter`.
fn derive_seed(seed: u64, iter: usize, tag: u64) -> u64 {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64 * 4 + tag);
    rng.next_u64()
}

fn number_of_draws<B: BlockOperator>(cfg: &SolverConfig, scores: &BlockScores, op: &B) -> Result<usize> {
    if let Some(s) = cfg.s_blocks {
        return Ok(s);
    }
    if cfg.auto_sketch_size {
        let s = min_sketch_size(scores.total(), op.cols(), cfg.delta_embed, cfg.epsilon_embed)?;
        return Ok(s.max(1));
    }
    Ok(((cfg.subsample_fraction * op.n_blocks() as f64).round() as usize).max(1))
}

fn scores_for<B: BlockOperator>(sampling: &Sampling<'_>, op: &B, lambda: f64) -> Result<BlockScores> {
    match sampling {
        Sampling::Uniform => Ok(BlockScores {
            per_block: vec![1.0; op.n_blocks()],
            ridge: lambda,
            block_size: op.block_rows(),
        }),
        Sampling::Surrogate {
            estimator,
            mixing,
            bin_weights,
        } => estimator.estimate(mixing, bin_weights, lambda),
        Sampling::Exact(b) => block_scores_of(op, &ridge_scores_exact(b, lambda), lambda),
    }
}

/// Pixels at (or within `active_set_tol` of) the bound whose gradient
/// pushes them outward.
fn active_set(cfg: &SolverConfig, x: &[f64], grad: &[f64]) -> Vec<bool> {
    if !cfg.nonnegative {
        return vec![false; x.len()];
    }
    let projected: Vec<f64> = x.iter().zip(grad).map(|(&xi, &gi)| xi - (xi - gi).max(0.0)).collect();
    let eps = cfg.active_set_tol.min(norm(&projected));
    x.iter().zip(grad).map(|(&xi, &gi)| xi <= eps && gi > 0.0).collect()
}

/// The partially sketched Newton direction at `x`: CG on
/// `(GᵀG + H_ρ) p = −∇g` with `G` the rows of `op` selected by `plan`.
/// Active pixels (see [`SolverConfig::active_set_tol`]) are left out of the
/// system and sent straight to the bound.
pub fn newton_step<B: BlockOperator>(
    op: &B,
    lin: &RedLinearization<'_>,
    x: &[f64],
    grad: &[f64],
    plan: &SketchPlan,
    cfg: &SolverConfig,
) -> Result<CgResult> {
    check_len("newton iterate", op.cols(), x.len())?;
    check_len("newton gradient", op.cols(), grad.len())?;
    let g_op = SketchedOperator::new(op, plan)?;
    let active = active_set(cfg, x, grad);
    let free = |v: &mut [f64]| {
        for (vi, &a) in v.iter_mut().zip(&active) {
            if a {
                *vi = 0.0;
            }
        }
    };
    let mut rhs: Vec<f64> = grad.iter().map(|v| -v).collect();
    free(&mut rhs);
    let mut cg = cg_solve(
        |v| {
            let mut h = g_op.normal_apply(v);
            axpy(1.0, &lin.hessian_action(v), &mut h);
            free(&mut h);
            h
        },
        &rhs,
        cfg.cg_max_iters,
        cfg.cg_rel_tol,
    );
    for ((p, &a), &xi) in cg.solution.iter_mut().zip(&active).zip(x) {
        if a {
            *p = -xi;
        }
    }
    Ok(cg)
}

/// Run the projected sub-sampled Newton iteration from `x0`.
pub fn denoising_ihs<B: BlockOperator>(problem: &Problem<'_, B>, cfg: &SolverConfig, x0: &[f64]) -> Result<SolveResult> {
    cfg.validate()?;
    problem.red.validate()?;
    let data = problem.data;
    let op = data.operator();
    check_len("initial iterate", op.cols(), x0.len())?;
    if let Some(t) = problem.truth {
        check_len("ground truth", op.cols(), t.len())?;
    }
    if cfg.nonnegative && x0.iter().any(|v| *v < 0.0) {
        return Err(Error::Parameter("initial iterate must be non-negative".into()));
    }
    let den = CountingDenoiser::new(problem.denoiser);
    let red = problem.red;
    let started = Instant::now();
    let accesses = || problem.counter.map_or(0, |c| c.row_accesses());
    let rmse_of = |x: &[f64]| {
        problem
            .truth
            .map(|t| crate::phantom::rmse(x, t, problem.n_materials.max(1)).map(|r| r.overall))
            .transpose()
    };

    let mut x = x0.to_vec();
    let mut dx = den.apply(&x);
    let (f0, mut grad_f) = data.loss_and_gradient(&x);
    let mut cost = f0 + RedLinearization::with_denoised(&den, red, &x, dx.clone()).value();
    let initial = IterationRecord {
        outer_iter: 0,
        cost,
        grad_norm: norm(&grad_f),
        rmse: rmse_of(&x)?,
        wall_time_s: started.elapsed().as_secs_f64(),
        row_accesses: accesses(),
        cg_iters: 0,
        cg_residual: 0.0,
        sum_block_scores: None,
        lambda_ridge: 0.0,
        distinct_views: 0,
        step: 0.0,
        backtracks: 0,
        negative_curvature: false,
        denoiser_calls: den.calls(),
        cg_denoiser_calls: 0,
    };
    let mut records = Vec::new();
    let mut status = SolveStatus::BudgetExhausted;
    let mut flat_steps = 0;

    for t in 1..=cfg.max_outer {
        let calls_before = den.calls();
        let lin = RedLinearization::with_denoised(&den, red, &x, dx.clone());
        let mut grad = grad_f.clone();
        axpy(1.0, &lin.gradient(), &mut grad);
        let grad_norm = norm(&grad);
        let lambda = lin.ridge(derive_seed(cfg.seed, t, 0));

        let (plan, sum_scores) = if cfg.full_hessian_mode {
            (SketchPlan::full(op.n_blocks()), None)
        } else {
            let scores = scores_for(&problem.sampling, op, lambda)?;
            let s = number_of_draws(cfg, &scores, op)?;
            (draw_sketch(&scores, s, derive_seed(cfg.seed, t, 1))?, Some(scores.total()))
        };
        let cg_calls_before = den.calls();
        let cg = newton_step(op, &lin, &x, &grad, &plan, cfg)?;
        // D(x) belongs to this linearization even when it was cached
        let cg_denoiser_calls = den.calls() - cg_calls_before + 1;
        drop(lin);

        let mut alpha = cfg.step_size;
        let mut accepted = None;
        let mut backtracks = 0;
        let mut best_trial = f64::INFINITY;
        if grad_norm > 0.0 {
            for k in 0..=cfg.max_backtracks {
                let mut trial = x.clone();
                axpy(alpha, &cg.solution, &mut trial);
                if cfg.nonnegative {
                    trial.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                let r = data.residual(&trial);
                let f_trial = 0.5 * norm(&r).powi(2);
                let d_trial = den.apply(&trial);
                let c_trial = f_trial + RedLinearization::with_denoised(&den, red, &trial, d_trial.clone()).value();
                best_trial = best_trial.min(c_trial);
                if c_trial <= cost {
                    accepted = Some((trial, r, d_trial, c_trial));
                    backtracks = k;
                    break;
                }
                alpha *= 0.5;
            }
        }

        let previous = cost;
        let step = match accepted {
            Some((trial, r, d_trial, c_trial)) => {
                let mut g = vec![0.0; op.cols()];
                op.adjoint_into(&r, &mut g);
                x = trial;
                dx = d_trial;
                grad_f = g;
                cost = c_trial;
                alpha
            }
            None => {
                backtracks = if grad_norm > 0.0 { cfg.max_backtracks } else { 0 };
                0.0
            }
        };
        records.push(IterationRecord {
            outer_iter: t,
            cost,
            grad_norm,
            rmse: rmse_of(&x)?,
            wall_time_s: started.elapsed().as_secs_f64(),
            row_accesses: accesses(),
            cg_iters: cg.iters,
            cg_residual: cg.residual_norm,
            sum_block_scores: sum_scores,
            lambda_ridge: lambda,
            distinct_views: plan.blocks.len(),
            step,
            backtracks,
            negative_curvature: cg.negative_curvature,
            denoiser_calls: den.calls() - calls_before,
            cg_denoiser_calls,
        });

        if grad_norm == 0.0 {
            status = SolveStatus::Converged;
            break;
        }
        if step == 0.0 {
            // a line search that fails only by rounding sits on the minimum
            let flat = (best_trial - cost) <= cfg.plateau_tol * cost.abs();
            status = if flat { SolveStatus::Converged } else { SolveStatus::Stalled };
            break;
        }
        let decrease = (previous - cost) / previous.abs().max(f64::MIN_POSITIVE);
        flat_steps = if decrease < cfg.plateau_tol { flat_steps + 1 } else { 0 };
        if flat_steps >= cfg.plateau_window {
            status = SolveStatus::Converged;
            break;
        }
    }
    Ok(SolveResult {
        x,
        initial,
        records,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::DenseBlocks;
    use crate::red::Identity;
    use rand::Rng;

    fn problem_matrix(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_solved_in_one_newton_step() {
        let a = problem_matrix(40, 8, 1);
        let truth: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.1).collect();
        let y = (&a * nalgebra::DVector::from_column_slice(&truth)).as_slice().to_vec();
        let data = DataTerm::new(DenseBlocks::new(a, 4).unwrap(), y).unwrap();
        let red = RedConfig::default();
        let problem = Problem {
            data: &data,
            denoiser: &Identity,
            red: &red,
            sampling: Sampling::Uniform,
            counter: None,
            truth: Some(&truth),
            n_materials: 1,
        };
        let cfg = SolverConfig {
            max_outer: 1,
            full_hessian_mode: true,
            nonnegative: false,
            cg_max_iters: 100,
            cg_rel_tol: 1e-14,
            ..SolverConfig::default()
        };
        let res = denoising_ihs(&problem, &cfg, &[0.0; 8]).unwrap();
        assert!(crate::linalg::rel_diff(&res.x, &truth) < 1e-10);
        assert_eq!(res.records.len(), 1);
    }

    #[test]
    fn csv_has_fixed_header() {
        let res = SolveResult {
            x: vec![],
            initial: IterationRecord {
                outer_iter: 0,
                cost: 1.0,
                grad_norm: 2.0,
                rmse: None,
                wall_time_s: 0.0,
                row_accesses: 0,
                cg_iters: 0,
                cg_residual: 0.0,
                sum_block_scores: None,
                lambda_ridge: 0.0,
                distinct_views: 0,
                step: 0.0,
                backtracks: 0,
                negative_curvature: false,
                denoiser_calls: 0,
                cg_denoiser_calls: 0,
            },
            records: vec![],
            status: SolveStatus::BudgetExhausted,
        };
        let csv = res.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), IterationRecord::CSV_HEADER);
        assert_eq!(lines.next().unwrap().split(',').count(), 9);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SolverConfig {
            subsample_fraction: 0.0,
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
