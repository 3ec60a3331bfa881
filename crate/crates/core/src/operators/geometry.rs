use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parallel-beam acquisition geometry.
///
/// The image is a square grid of `image_side × image_side` pixels of edge
/// `pixel_size`, centred on the rotation axis. Detector `k` of every view
/// sits at signed offset `(k - (n_detectors - 1) / 2) * detector_spacing`;
/// the ray of view `θ` through offset `t` is `{x : x·(cos θ, sin θ) = t}`.
/// Pixel `(row, col)` is stored at `row * image_side + col` and its centre
/// lies at `((col - (I-1)/2) h, (row - (I-1)/2) h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadonGeometry {
    pub image_side: usize,
    pub n_detectors: usize,
    pub angles: Vec<f64>,
    pub detector_spacing: f64,
    pub pixel_size: f64,
}

impl RadonGeometry {
    pub fn new(
        image_side: usize,
        n_detectors: usize,
        angles: Vec<f64>,
        detector_spacing: f64,
        pixel_size: f64,
    ) -> Result<Self> {
        let g = Self {
            image_side,
            n_detectors,
            angles,
            detector_spacing,
            pixel_size,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n_views` equispaced angles in `[0, π)`, unit pixels, unit detector
    /// spacing and enough detectors to cover the image diagonal.
    pub fn parallel(image_side: usize, n_views: usize) -> Result<Self> {
        let n_det = Self::covering_detectors(image_side, 1.0, 1.0);
        Self::new(image_side, n_det, uniform_angles(n_views), 1.0, 1.0)
    }

    /// Smallest detector count whose span covers the image diagonal.
    pub fn covering_detectors(image_side: usize, pixel_size: f64, spacing: f64) -> usize {
        let diag = std::f64::consts::SQRT_2 * image_side as f64 * pixel_size;
        (diag / spacing).ceil() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 2 {
            return Err(Error::Geometry(format!(
                "image_side must be >= 2, got {}",
                self.image_side
            )));
        }
        if self.n_detectors == 0 {
            return Err(Error::Geometry("n_detectors must be >= 1".into()));
        }
        if self.angles.is_empty() {
            return Err(Error::Geometry("at least one view angle is required".into()));
        }
        if !(self.detector_spacing > 0.0 && self.detector_spacing.is_finite()) {
            return Err(Error::Geometry("detector_spacing must be positive".into()));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::Geometry("pixel_size must be positive".into()));
        }
        let pi = std::f64::consts::PI;
        for (i, &a) in self.angles.iter().enumerate() {
            if !(0.0..pi).contains(&a) {
                return Err(Error::Geometry(format!("angle {i} = {a} outside [0, π)")));
            }
            if i > 0 && a <= self.angles[i - 1] {
                return Err(Error::Geometry("angles must be strictly increasing".into()));
            }
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn n_rays(&self) -> usize {
        self.n_views() * self.n_detectors
    }

    /// Detector offset in physical units.
    pub fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// The same acquisition on a grid refined by `factor` (same field of
    /// view, pixels `factor` times smaller).
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            image_side: self.image_side * factor,
            pixel_size: self.pixel_size / factor as f64,
            ..self.clone()
        }
    }
}

pub fn uniform_angles(n_views: usize) -> Vec<f64> {
    (0..n_views)
        .map(|i| std::f64::consts::PI * i as f64 / n_views as f64)
        .collect()
}
