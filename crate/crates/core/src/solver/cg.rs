use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, norm};

/// Outcome of [`cg_solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgResult {
    pub solution: Vec<f64>,
    pub iters: usize,
    pub residual_norm: f64,
    pub converged: bool,
    /// A search direction with `dᵀ H d ≤ 0` was met and the solve stopped.
    pub negative_curvature: bool,
}

/// Conjugate gradients for `H p = rhs` from `p = 0`, with `H` given only
/// through its action. Stops when `‖H p − rhs‖ ≤ rel_tol ‖rhs‖` or after
/// `max_iters` actions.
pub fn cg_solve(
    hess_action: impl FnMut(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    max_iters: usize,
    rel_tol: f64,
) -> CgResult {
    cg_solve_observed(hess_action, rhs, max_iters, rel_tol, |_, _| {})
}

/// [`cg_solve`] calling `observe(iter, p_iter)` after every iteration.
///
/// On negative curvature the current iterate is returned; if that happens
/// on the very first direction the iterate is still zero and the
/// right-hand side (the steepest-descent direction) is returned instead.
pub fn cg_solve_observed(
    mut hess_action: impl FnMut(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    max_iters: usize,
    rel_tol: f64,
    mut observe: impl FnMut(usize, &[f64]),
) -> CgResult {
    let n = rhs.len();
    let mut p = vec![0.0; n];
    let mut r = rhs.to_vec();
    let rhs_norm = norm(rhs);
    let mut rr = dot(&r, &r);
    let target = rel_tol * rhs_norm;
    if rhs_norm == 0.0 {
        return CgResult {
            solution: p,
            iters: 0,
            residual_norm: 0.0,
            converged: true,
            negative_curvature: false,
        };
    }
    let mut d = r.clone();
    let mut iters = 0;
    let mut negative_curvature = false;
    while iters < max_iters && rr.sqrt() > target {
        let hd = hess_action(&d);
        let curv = dot(&d, &hd);
        if !(curv > 0.0) {
            negative_curvature = true;
            if iters == 0 {
                p.copy_from_slice(rhs);
            }
            break;
        }
        let alpha = rr / curv;
        axpy(alpha, &d, &mut p);
        axpy(-alpha, &hd, &mut r);
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        rr = rr_next;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
        iters += 1;
        observe(iters, &p);
    }
    CgResult {
        solution: p,
        iters,
        residual_norm: rr.sqrt(),
        converged: rr.sqrt() <= target,
        negative_curvature,
    }
}
