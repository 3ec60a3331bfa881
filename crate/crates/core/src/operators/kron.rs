use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{BlockOperator, LinearMap, ViewOperator};

/// The spectral system operator `A = C ⊗ R`.
///
/// Input `x = vec(X)` is material-major (all pixels of material 0, then
/// material 1, ...). Output is bin-major: bin `b` holds the sinogram
/// `Σ_m C[b, m] R x_m`, i.e. `vec(R X Cᵀ)`. Materials and bins are mixed on
/// whichever side needs fewer projections, so one apply costs
/// `min(N_b, N_m)` Radon evaluations.
#[derive(Clone)]
pub struct KroneckerMap {
    left: DMatrix<f64>,
    right: Arc<dyn ViewOperator>,
}

impl std::fmt::Debug for KroneckerMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KroneckerMap")
            .field("left", &self.left)
            .field("radon_rows", &self.right.rows())
            .finish()
    }
}

impl KroneckerMap {
    pub fn new(left: DMatrix<f64>, right: Arc<dyn ViewOperator>) -> Self {
        Self { left, right }
    }

    pub fn left(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn radon(&self) -> &Arc<dyn ViewOperator> {
        &self.right
    }

    pub fn n_bins(&self) -> usize {
        self.left.nrows()
    }

    pub fn n_materials(&self) -> usize {
        self.left.ncols()
    }

    pub fn n_pixels(&self) -> usize {
        self.right.cols()
    }

    /// `Σ_k coeff(k) · v_k` over equal-length chunks of `src`.
    fn mix(src: &[f64], chunk: usize, coeff: impl Fn(usize) -> f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, part) in src.chunks_exact(chunk).enumerate() {
            let c = coeff(k);
            if c != 0.0 {
                crate::linalg::axpy(c, part, out);
            }
        }
    }

    /// Forward projection restricted to `views`. `out` is bin-major with
    /// `views.len() * n_detectors` entries per bin.
    pub fn apply_views(&self, x: &[f64], views: &[usize], out: &mut [f64]) {
        let (nb, nm, nv) = (self.n_bins(), self.n_materials(), self.n_pixels());
        let seg = views.len() * self.right.n_detectors();
        assert_eq!(x.len(), nv * nm, "kron apply: input length");
        assert_eq!(out.len(), seg * nb, "kron apply: output length");
        if nb <= nm {
            out.par_chunks_mut(seg.max(1)).enumerate().for_each(|(b, o)| {
                let mut z = vec![0.0; nv];
                Self::mix(x, nv, |m| self.left[(b, m)], &mut z);
                self.right.forward_views(&z, views, o);
            });
        } else {
            let sinos: Vec<Vec<f64>> = x
                .par_chunks(nv)
                .map(|xm| {
                    let mut s = vec![0.0; seg];
                    self.right.forward_views(xm, views, &mut s);
                    s
                })
                .collect();
            let flat = sinos.concat();
            out.par_chunks_mut(seg.max(1))
                .enumerate()
                .for_each(|(b, o)| Self::mix(&flat, seg, |m| self.left[(b, m)], o));
        }
    }

    /// Back-projection of bin-major data living on `views`.
    pub fn adjoint_views(&self, data: &[f64], views: &[usize], out: &mut [f64]) {
        let (nb, nm, nv) = (self.n_bins(), self.n_materials(), self.n_pixels());
        let seg = views.len() * self.right.n_detectors();
        assert_eq!(data.len(), seg * nb, "kron adjoint: input length");
        assert_eq!(out.len(), nv * nm, "kron adjoint: output length");
        if nb <= nm {
            let backs: Vec<Vec<f64>> = data
                .par_chunks(seg.max(1))
                .map(|yb| {
                    let mut z = vec![0.0; nv];
                    self.right.adjoint_views(yb, views, &mut z);
                    z
                })
                .collect();
            let flat = backs.concat();
            out.par_chunks_mut(nv)
                .enumerate()
                .for_each(|(m, o)| Self::mix(&flat, nv, |b| self.left[(b, m)], o));
        } else {
            out.par_chunks_mut(nv).enumerate().for_each(|(m, o)| {
                let mut w = vec![0.0; seg];
                Self::mix(data, seg, |b| self.left[(b, m)], &mut w);
                self.right.adjoint_views(&w, views, o);
            });
        }
    }
}

impl LinearMap for KroneckerMap {
    fn rows(&self) -> usize {
        self.n_bins() * self.right.rows()
    }

    fn cols(&self) -> usize {
        self.n_materials() * self.n_pixels()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let views: Vec<usize> = (0..self.right.n_views()).collect();
        self.apply_views(x, &views, y);
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let views: Vec<usize> = (0..self.right.n_views()).collect();
        self.adjoint_views(y, &views, x);
    }
}

impl BlockOperator for KroneckerMap {
    fn n_blocks(&self) -> usize {
        self.right.n_views()
    }

    fn n_segments(&self) -> usize {
        self.n_bins()
    }

    fn segment_rows(&self) -> usize {
        self.right.n_detectors()
    }

    fn apply_blocks(&self, x: &[f64], blocks: &[usize], out: &mut [f64]) {
        self.apply_views(x, blocks, out)
    }

    fn adjoint_blocks(&self, data: &[f64], blocks: &[usize], out: &mut [f64]) {
        self.adjoint_views(data, blocks, out)
    }
}
