//! Fourier-slice parallel-beam projector.
//!
//! `R x = Re( F_1^{-1} · Φ · W · F_2 · P · Dₐ x )` where `Dₐ` is the
//! deapodization that undoes the bilinear interpolation kernel, `P` embeds
//! the image centred in a zero-padded power-of-two grid, `F_2` is the 2-D
//! DFT, `W` samples every radial line by bilinear interpolation, `Φ` carries
//! the scaling and the phase shifts between the grid origin, the pixel
//! centres and the detector origin, and `F_1^{-1}` is a 1-D inverse DFT per
//! view. Every factor is a plain matrix, so the adjoint is the exact
//! transpose `Re( Dₐ Pᵀ F_2 Wᵀ Φ F_1^{-1} v )`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::fft2::Fft2;
use super::{LinearMap, RadonGeometry, ViewOperator};

#[derive(Debug, Clone, Copy)]
struct SliceSample {
    idx: [u32; 4],
    w: [f64; 4],
    phase: Complex64,
    slot: u32,
}

#[derive(Clone)]
pub struct FourierRadon {
    geom: RadonGeometry,
    pad: usize,
    fft2: Fft2,
    ifft1: Arc<dyn Fft<f64>>,
    pixel_index: Vec<u32>,
    deapod: Vec<f64>,
    samples: Vec<SliceSample>,
}

impl std::fmt::Debug for FourierRadon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FourierRadon")
            .field("geom", &self.geom)
            .field("pad", &self.pad)
            .finish()
    }
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        (PI * u).sin() / (PI * u)
    }
}

impl FourierRadon {
    /// Oversampling of the padded grid relative to the next power of two.
    pub const DEFAULT_OVERSAMPLING: usize = 4;

    pub fn new(geom: RadonGeometry) -> Self {
        Self::with_oversampling(geom, Self::DEFAULT_OVERSAMPLING)
    }

    pub fn with_oversampling(geom: RadonGeometry, oversampling: usize) -> Self {
        let side = geom.image_side;
        let pad = side.next_power_of_two() * oversampling.max(1);
        let half = (side / 2) as isize;
        // pixel centre sits at (index - half + offset) pixels from the axis
        let offset = half as f64 - (side as f64 - 1.0) / 2.0;

        let wrap = |q: isize| q.rem_euclid(pad as isize) as usize;
        let mut pixel_index = Vec::with_capacity(side * side);
        let mut deapod = Vec::with_capacity(side * side);
        for row in 0..side {
            let qy = row as isize - half;
            for col in 0..side {
                let qx = col as isize - half;
                pixel_index.push((wrap(qy) * pad + wrap(qx)) as u32);
                let a = sinc(qx as f64 / pad as f64) * sinc(qy as f64 / pad as f64);
                deapod.push(1.0 / (a * a));
            }
        }

        let nd = geom.n_detectors;
        let spacing_px = geom.detector_spacing / geom.pixel_size;
        let scale = geom.pixel_size * geom.pixel_size / (nd as f64 * geom.detector_spacing);
        let j0 = (nd / 2) as isize;
        let mut samples = Vec::with_capacity(geom.n_rays());
        for &theta in &geom.angles {
            let (c, s) = (theta.cos(), theta.sin());
            for jj in 0..nd {
                let j = jj as isize - j0;
                let u = j as f64 / (nd as f64 * spacing_px);
                let fx = u * c * pad as f64;
                let fy = u * s * pad as f64;
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - x0, fy - y0);
                // a pixel image carries no content beyond its Nyquist band
                let inside = fx.abs() <= pad as f64 / 2.0 && fy.abs() <= pad as f64 / 2.0;
                let scale = if inside { scale } else { 0.0 };
                let (x0, y0) = (x0 as isize, y0 as isize);
                let at = |y: isize, x: isize| (wrap(y) * pad + wrap(x)) as u32;
                let shift = -2.0 * PI * u * offset * (c + s) - PI * j as f64 * (nd as f64 - 1.0) / nd as f64;
                samples.push(SliceSample {
                    idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
                    w: [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay],
                    phase: Complex64::from_polar(scale, shift),
                    slot: j.rem_euclid(nd as isize) as u32,
                });
            }
        }

        let ifft1 = FftPlanner::new().plan_fft_inverse(nd);
        Self {
            fft2: Fft2::new(pad),
            pad,
            ifft1,
            pixel_index,
            deapod,
            samples,
            geom,
        }
    }

    pub fn geometry(&self) -> &RadonGeometry {
        &self.geom
    }

    pub fn padded_side(&self) -> usize {
        self.pad
    }

    fn image_spectrum(&self, image: &[f64]) -> Vec<Complex64> {
        let mut grid = vec![Complex64::default(); self.pad * self.pad];
        for ((&v, &idx), &d) in image.iter().zip(&self.pixel_index).zip(&self.deapod) {
            grid[idx as usize] = Complex64::new(v * d, 0.0);
        }
        self.fft2.forward(&mut grid);
        grid
    }
}

impl LinearMap for FourierRadon {
    fn rows(&self) -> usize {
        self.geom.n_rays()
    }

    fn cols(&self) -> usize {
        self.geom.n_pixels()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let views: Vec<usize> = (0..self.geom.n_views()).collect();
        self.forward_views(x, &views, y);
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let views: Vec<usize> = (0..self.geom.n_views()).collect();
        self.adjoint_views(y, &views, x);
    }
}

impl ViewOperator for FourierRadon {
    fn n_views(&self) -> usize {
        self.geom.n_views()
    }

    fn n_detectors(&self) -> usize {
        self.geom.n_detectors
    }

    fn forward_views(&self, image: &[f64], views: &[usize], out: &mut [f64]) {
        let nd = self.geom.n_detectors;
        assert_eq!(image.len(), self.geom.n_pixels(), "fourier projector: image length");
        assert_eq!(out.len(), views.len() * nd, "fourier projector: output length");
        if views.is_empty() {
            return;
        }
        let grid = self.image_spectrum(image);
        let mut line = vec![Complex64::default(); nd];
        for (slot, &view) in views.iter().enumerate() {
            line.iter_mut().for_each(|v| *v = Complex64::default());
            for smp in &self.samples[view * nd..(view + 1) * nd] {
                let mut acc = Complex64::default();
                for k in 0..4 {
                    acc += grid[smp.idx[k] as usize] * smp.w[k];
                }
                line[smp.slot as usize] = acc * smp.phase;
            }
            self.ifft1.process(&mut line);
            for (o, v) in out[slot * nd..(slot + 1) * nd].iter_mut().zip(&line) {
                *o = v.re;
            }
        }
    }

    fn adjoint_views(&self, data: &[f64], views: &[usize], out: &mut [f64]) {
        let nd = self.geom.n_detectors;
        assert_eq!(data.len(), views.len() * nd, "fourier back-projector: data length");
        assert_eq!(out.len(), self.geom.n_pixels(), "fourier back-projector: output length");
        let mut grid = vec![Complex64::default(); self.pad * self.pad];
        let mut line = vec![Complex64::default(); nd];
        for (slot, &view) in views.iter().enumerate() {
            for (l, &d) in line.iter_mut().zip(&data[slot * nd..(slot + 1) * nd]) {
                *l = Complex64::new(d, 0.0);
            }
            // the 1-D DFT matrix is symmetric, so its transpose is itself
            self.ifft1.process(&mut line);
            for smp in &self.samples[view * nd..(view + 1) * nd] {
                let c = line[smp.slot as usize] * smp.phase;
                for k in 0..4 {
                    grid[smp.idx[k] as usize] += c * smp.w[k];
                }
            }
        }
        self.fft2.forward(&mut grid);
        for ((o, &idx), &d) in out.iter_mut().zip(&self.pixel_index).zip(&self.deapod) {
            *o = grid[idx as usize].re * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{adjoint_mismatch, RayRadon};

    #[test]
    fn zero_image_zero_sinogram() {
        let op = FourierRadon::new(RadonGeometry::parallel(16, 8).unwrap());
        let y = op.apply(&vec![0.0; 256]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_consistency() {
        for side in [8, 12, 16] {
            let op = FourierRadon::new(RadonGeometry::parallel(side, 9).unwrap());
            let worst = adjoint_mismatch(&op, 20, side as u64);
            assert!(worst < 1e-8, "side {side}: {worst}");
        }
    }

    fn gaussian_bump(side: usize, cx: f64, cy: f64, sigma: f64) -> Vec<f64> {
        let c = (side as f64 - 1.0) / 2.0;
        let mut img = vec![0.0; side * side];
        for r in 0..side {
            for col in 0..side {
                let (x, y) = (col as f64 - c - cx, r as f64 - c - cy);
                img[r * side + col] = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            }
        }
        img
    }

    #[test]
    fn agrees_with_ray_driven_on_smooth_bump() {
        let g = RadonGeometry::parallel(32, 16).unwrap();
        let img = gaussian_bump(32, 2.0, -3.0, 3.0);
        let f = FourierRadon::new(g.clone()).apply(&img).unwrap();
        let r = RayRadon::new(g).apply(&img).unwrap();
        let rel = crate::linalg::rel_diff(&f, &r);
        assert!(rel <= 0.05, "relative L2 distance {rel}");
    }

    #[test]
    fn odd_sides_are_padded() {
        let g = RadonGeometry::parallel(13, 10).unwrap();
        let op = FourierRadon::new(g.clone());
        assert_eq!(op.padded_side(), 64);
        let img = gaussian_bump(13, 0.0, 1.0, 2.0);
        let f = op.apply(&img).unwrap();
        let r = RayRadon::new(g).apply(&img).unwrap();
        assert!(crate::linalg::rel_diff(&f, &r) <= 0.05);
    }
}
