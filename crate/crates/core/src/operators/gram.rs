//! Circulant approximation of the Radon normal operator `RᵀR`.
//!
//! In the continuum, back-projecting the projections of an image over
//! `N_p` equispaced views is a convolution whose Fourier multiplier is
//! `(N_p / π) · (h² / Δ) / |κ|` with `κ` in cycles per unit length. On the
//! padded `N × N` FFT grid index `n` maps to `|κ| = |n| / (N h)`.
//! Frequencies beyond the detector Nyquist limit `1 / (2Δ)` are not
//! measured and get a zero multiplier. The singular DC sample is replaced by
//! the mass of `1/|κ|` over the disk of radius `Δ_ρ / 2`, where
//! `Δ_ρ = 1 / (N_d Δ)` is the radial frequency step of the projections,
//! spread over one grid cell.

use num_complex::Complex64;

use super::fft2::Fft2;
use super::{LinearMap, RadonGeometry};

#[derive(Debug, Clone)]
pub struct GramFft {
    side: usize,
    pad: usize,
    fft2: Fft2,
    multiplier: Vec<f64>,
    pixel_index: Vec<u32>,
}

impl GramFft {
    pub fn new(geom: &RadonGeometry) -> Self {
        let side = geom.image_side;
        let pad = 2 * side.next_power_of_two();
        let h = geom.pixel_size;
        let gain = geom.n_views() as f64 * h.powi(3) * pad as f64
            / (std::f64::consts::PI * geom.detector_spacing);
        let fold = |k: usize| {
            if k <= pad / 2 {
                k as f64
            } else {
                k as f64 - pad as f64
            }
        };
        let cutoff = pad as f64 * h / (2.0 * geom.detector_spacing);
        // ∫_{|κ| < Δ_ρ/2} dκ / |κ| = π Δ_ρ, divided by the cell area 1/(N h)²
        let delta_rho = 1.0 / (geom.n_detectors as f64 * geom.detector_spacing);
        let dc = gain * std::f64::consts::PI * delta_rho * pad as f64 * h;
        let mut multiplier = Vec::with_capacity(pad * pad);
        for ky in 0..pad {
            for kx in 0..pad {
                let r = fold(kx).hypot(fold(ky));
                multiplier.push(if r == 0.0 {
                    dc
                } else if r > cutoff {
                    0.0
                } else {
                    gain / r
                });
            }
        }
        let half = (side / 2) as isize;
        let wrap = |q: isize| q.rem_euclid(pad as isize) as usize;
        let mut pixel_index = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                let (qy, qx) = (row as isize - half, col as isize - half);
                pixel_index.push((wrap(qy) * pad + wrap(qx)) as u32);
            }
        }
        Self {
            side,
            pad,
            fft2: Fft2::new(pad),
            multiplier,
            pixel_index,
        }
    }

    pub fn padded_side(&self) -> usize {
        self.pad
    }

    /// Fourier multiplier on the padded grid, row-major `pad × pad`.
    pub fn multiplier(&self) -> &[f64] {
        &self.multiplier
    }

    /// Unnormalized 2-D DFT of the zero-padded image.
    pub fn spectrum(&self, image: &[f64]) -> Vec<Complex64> {
        assert_eq!(image.len(), self.side * self.side, "gram: image length");
        let mut grid = vec![Complex64::default(); self.pad * self.pad];
        for (&v, &idx) in image.iter().zip(&self.pixel_index) {
            grid[idx as usize] = Complex64::new(v, 0.0);
        }
        self.fft2.forward(&mut grid);
        grid
    }
}

impl LinearMap for GramFft {
    fn rows(&self) -> usize {
        self.side * self.side
    }

    fn cols(&self) -> usize {
        self.side * self.side
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(y.len(), self.side * self.side, "gram: output length");
        let mut grid = self.spectrum(x);
        for (g, &m) in grid.iter_mut().zip(&self.multiplier) {
            *g *= m;
        }
        self.fft2.inverse(&mut grid);
        let norm = 1.0 / (self.pad * self.pad) as f64;
        for (o, &idx) in y.iter_mut().zip(&self.pixel_index) {
            *o = grid[idx as usize].re * norm;
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.apply_into(y, x)
    }
}
