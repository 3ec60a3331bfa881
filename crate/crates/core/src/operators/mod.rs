//! Matrix-free linear operators.
//!
//! Everything the solver touches is expressed through [`LinearMap`]: the
//! single-material Radon transform `R`, the spectral Kronecker map
//! `A = C ⊗ R`, and the weighted square-root Hessian `B = Σ^{-1/2} A`.
//! Radon implementations additionally expose their view structure through
//! [`ViewOperator`] so that a sketch can evaluate only the sampled views.

mod counting;
mod fft2;
mod fourier;
mod geometry;
mod gram;
mod kron;
mod ray;

pub use counting::{CountingOperator, WorkCounter};
pub use fourier::FourierRadon;
pub use geometry::{uniform_angles, RadonGeometry};
pub use gram::GramFft;
pub use kron::KroneckerMap;
pub use ray::RayRadon;

use nalgebra::DMatrix;

use crate::error::{check_len, Result};

/// A real linear map `R^cols -> R^rows` with its adjoint.
///
/// `apply_into` and `adjoint_into` overwrite their output and panic on a
/// length mismatch; the checked `apply` / `adjoint` report it as an error.
/// Implementations must be safe to call concurrently from several threads.
pub trait LinearMap: Send + Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply_into(&self, x: &[f64], y: &mut [f64]);
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("LinearMap::apply input", self.cols(), x.len())?;
        let mut y = vec![0.0; self.rows()];
        self.apply_into(x, &mut y);
        Ok(y)
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("LinearMap::adjoint input", self.rows(), y.len())?;
        let mut x = vec![0.0; self.cols()];
        self.adjoint_into(y, &mut x);
        Ok(x)
    }
}

/// A single-channel projector whose rows are grouped in contiguous view
/// blocks of `n_detectors` rows each (row index = `view * n_detectors + det`).
pub trait ViewOperator: LinearMap {
    fn n_views(&self) -> usize;
    fn n_detectors(&self) -> usize;

    /// Project `image` onto the listed views only. `out` holds
    /// `views.len() * n_detectors` values, in the order of `views`.
    fn forward_views(&self, image: &[f64], views: &[usize], out: &mut [f64]);

    /// Back-project data living on the listed views. `data` is laid out as
    /// for [`ViewOperator::forward_views`]; `out` is overwritten.
    fn adjoint_views(&self, data: &[f64], views: &[usize], out: &mut [f64]);
}

/// A linear map whose rows split into `n_blocks` blocks that can be
/// evaluated independently, the unit of sub-sampling.
///
/// Rows are organised in `n_segments` segments of `n_blocks ·
/// segment_rows` rows each; block `b` owns rows `seg · n_blocks ·
/// segment_rows + b · segment_rows + r`. For the spectral operator a block is
/// one view, a segment is one energy bin and `segment_rows = N_d`.
pub trait BlockOperator: LinearMap {
    fn n_blocks(&self) -> usize;
    fn n_segments(&self) -> usize;
    fn segment_rows(&self) -> usize;

    /// Rows of the listed blocks. `out` is segment-major: for each segment,
    /// the `segment_rows` rows of every listed block in order.
    fn apply_blocks(&self, x: &[f64], blocks: &[usize], out: &mut [f64]);

    /// Transpose of [`BlockOperator::apply_blocks`]; `out` is overwritten.
    fn adjoint_blocks(&self, data: &[f64], blocks: &[usize], out: &mut [f64]);

    fn block_rows(&self) -> usize {
        self.n_segments() * self.segment_rows()
    }

    /// Global row indices of block `b`.
    fn rows_of_block(&self, b: usize) -> Vec<usize> {
        let (nb, sr) = (self.n_blocks(), self.segment_rows());
        (0..self.n_segments())
            .flat_map(|s| (0..sr).map(move |r| s * nb * sr + b * sr + r))
            .collect()
    }

    /// Call `f(k, global_row)` for every position `k` of a block-restricted
    /// output.
    fn for_each_block_row(&self, blocks: &[usize], mut f: impl FnMut(usize, usize))
    where
        Self: Sized,
    {
        let (nb, sr) = (self.n_blocks(), self.segment_rows());
        let mut k = 0;
        for s in 0..self.n_segments() {
            for &b in blocks {
                let base = s * nb * sr + b * sr;
                for r in 0..sr {
                    f(k, base + r);
                    k += 1;
                }
            }
        }
    }
}

/// A dense matrix whose rows form contiguous blocks of `block_size`.
#[derive(Debug, Clone)]
pub struct DenseBlocks {
    pub matrix: DMatrix<f64>,
    pub block_size: usize,
}

impl DenseBlocks {
    pub fn new(matrix: DMatrix<f64>, block_size: usize) -> Result<Self> {
        if block_size == 0 || !matrix.nrows().is_multiple_of(block_size) {
            return Err(crate::error::Error::Parameter(format!(
                "{} rows do not split into blocks of {block_size}",
                matrix.nrows()
            )));
        }
        Ok(Self { matrix, block_size })
    }
}

impl LinearMap for DenseBlocks {
    fn rows(&self) -> usize {
        self.matrix.nrows()
    }
    fn cols(&self) -> usize {
        self.matrix.ncols()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        LinearMap::apply_into(&self.matrix, x, y)
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        LinearMap::adjoint_into(&self.matrix, y, x)
    }
}

impl BlockOperator for DenseBlocks {
    fn n_blocks(&self) -> usize {
        self.matrix.nrows() / self.block_size
    }
    fn n_segments(&self) -> usize {
        1
    }
    fn segment_rows(&self) -> usize {
        self.block_size
    }
    fn apply_blocks(&self, x: &[f64], blocks: &[usize], out: &mut [f64]) {
        assert_eq!(x.len(), self.matrix.ncols());
        assert_eq!(out.len(), blocks.len() * self.block_size);
        let mut k = 0;
        for &b in blocks {
            for i in b * self.block_size..(b + 1) * self.block_size {
                out[k] = self.matrix.row(i).iter().zip(x).map(|(a, v)| a * v).sum();
                k += 1;
            }
        }
    }
    fn adjoint_blocks(&self, data: &[f64], blocks: &[usize], out: &mut [f64]) {
        assert_eq!(data.len(), blocks.len() * self.block_size);
        assert_eq!(out.len(), self.matrix.ncols());
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut k = 0;
        for &b in blocks {
            for i in b * self.block_size..(b + 1) * self.block_size {
                let d = data[k];
                k += 1;
                if d != 0.0 {
                    for (o, a) in out.iter_mut().zip(self.matrix.row(i).iter()) {
                        *o += a * d;
                    }
                }
            }
        }
    }
}

impl<T: LinearMap + ?Sized> LinearMap for &T {
    fn rows(&self) -> usize {
        (**self).rows()
    }
    fn cols(&self) -> usize {
        (**self).cols()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply_into(x, y)
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        (**self).adjoint_into(y, x)
    }
}

impl<T: BlockOperator> BlockOperator for &T {
    fn n_blocks(&self) -> usize {
        (**self).n_blocks()
    }
    fn n_segments(&self) -> usize {
        (**self).n_segments()
    }
    fn segment_rows(&self) -> usize {
        (**self).segment_rows()
    }
    fn apply_blocks(&self, x: &[f64], blocks: &[usize], out: &mut [f64]) {
        (**self).apply_blocks(x, blocks, out)
    }
    fn adjoint_blocks(&self, data: &[f64], blocks: &[usize], out: &mut [f64]) {
        (**self).adjoint_blocks(data, blocks, out)
    }
}

impl<T: LinearMap + ?Sized> LinearMap for std::sync::Arc<T> {
    fn rows(&self) -> usize {
        (**self).rows()
    }
    fn cols(&self) -> usize {
        (**self).cols()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply_into(x, y)
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        (**self).adjoint_into(y, x)
    }
}

impl<T: ViewOperator + ?Sized> ViewOperator for std::sync::Arc<T> {
    fn n_views(&self) -> usize {
        (**self).n_views()
    }
    fn n_detectors(&self) -> usize {
        (**self).n_detectors()
    }
    fn forward_views(&self, image: &[f64], views: &[usize], out: &mut [f64]) {
        (**self).forward_views(image, views, out)
    }
    fn adjoint_views(&self, data: &[f64], views: &[usize], out: &mut [f64]) {
        (**self).adjoint_views(data, views, out)
    }
}

/// Dense matrices act as linear maps; used for oracles and small problems.
impl LinearMap for DMatrix<f64> {
    fn rows(&self) -> usize {
        self.nrows()
    }
    fn cols(&self) -> usize {
        self.ncols()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols());
        assert_eq!(y.len(), self.nrows());
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        assert_eq!(y.len(), self.nrows());
        assert_eq!(x.len(), self.ncols());
        x.iter_mut().for_each(|v| *v = 0.0);
        for (i, yi) in y.iter().enumerate() {
            for (j, xj) in x.iter_mut().enumerate() {
                *xj += self[(i, j)] * yi;
            }
        }
    }
}

/// Diagonal scaling `diag(d)`.
#[derive(Debug, Clone)]
pub struct DiagonalMap {
    pub diag: Vec<f64>,
}

impl LinearMap for DiagonalMap {
    fn rows(&self) -> usize {
        self.diag.len()
    }
    fn cols(&self) -> usize {
        self.diag.len()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.diag.len());
        assert_eq!(y.len(), self.diag.len());
        for ((yi, xi), di) in y.iter_mut().zip(x).zip(&self.diag) {
            *yi = di * xi;
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.apply_into(y, x)
    }
}

/// Materialize any linear map as a dense matrix by applying it to the
/// canonical basis. Only meant for small oracle checks.
pub fn materialize(op: &dyn LinearMap) -> DMatrix<f64> {
    let (m, n) = (op.rows(), op.cols());
    let mut out = DMatrix::zeros(m, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        e[j] = 1.0;
        op.apply_into(&e, &mut col);
        out.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    out
}

/// Worst relative adjoint mismatch `|<Au, v> - <u, A^T v>| / (||u|| ||v|| + 1)`
/// over `pairs` random vector pairs.
pub fn adjoint_mismatch(op: &dyn LinearMap, pairs: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..pairs {
        let u: Vec<f64> = (0..op.cols()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..op.rows()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut au = vec![0.0; op.rows()];
        let mut atv = vec![0.0; op.cols()];
        op.apply_into(&u, &mut au);
        op.adjoint_into(&v, &mut atv);
        let lhs = crate::linalg::dot(&au, &v);
        let rhs = crate::linalg::dot(&u, &atv);
        let scale = crate::linalg::norm(&u) * crate::linalg::norm(&v) + 1.0;
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    worst
}
