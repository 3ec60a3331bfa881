//! Circle phantoms and RMSE bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// One disk of constant concentration. Positions and radius are fractions
/// of the image side; `center_x` runs along columns and `center_y` along rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circle {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub material: usize,
    pub concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_side: usize,
    pub circles: Vec<Circle>,
}

impl PhantomSpec {
    pub fn validate(&self, n_materials: usize) -> Result<()> {
        if self.image_side == 0 {
            return Err(Error::Parameter("phantom image_side must be positive".into()));
        }
        for (i, c) in self.circles.iter().enumerate() {
            let inside = c.radius >= 0.0
                && c.center_x - c.radius >= -1e-12
                && c.center_x + c.radius <= 1.0 + 1e-12
                && c.center_y - c.radius >= -1e-12
                && c.center_y + c.radius <= 1.0 + 1e-12;
            if !inside {
                return Err(Error::Parameter(format!("circle {i} leaves the unit square")));
            }
            if !(c.concentration >= 0.0 && c.concentration.is_finite()) {
                return Err(Error::Parameter(format!("circle {i} has a negative concentration")));
            }
            if c.material >= n_materials {
                return Err(Error::Parameter(format!(
                    "circle {i} uses material {} but only {n_materials} exist",
                    c.material
                )));
            }
        }
        Ok(())
    }

    /// The same layout at a different resolution.
    pub fn with_side(&self, image_side: usize) -> Self {
        Self {
            image_side,
            circles: self.circles.clone(),
        }
    }
}

/// The 64×64-style desk phantom for water / iodine / gadolinium: a water
/// disk holding a ring of eight inserts with increasing diameter,
/// alternating iodine and gadolinium. Insert concentrations are in units of
/// 10 mg/ml.
pub fn desk_phantom(image_side: usize) -> PhantomSpec {
    let mut circles = vec![Circle {
        center_x: 0.5,
        center_y: 0.5,
        radius: 0.44,
        material: 0,
        concentration: 1.0,
    }];
    for k in 0..8 {
        let angle = std::f64::consts::TAU * k as f64 / 8.0;
        circles.push(Circle {
            center_x: 0.5 + 0.25 * angle.cos(),
            center_y: 0.5 + 0.25 * angle.sin(),
            radius: 0.035 + 0.006 * k as f64,
            material: 1 + k % 2,
            concentration: 0.5 + 0.5 * (k / 2) as f64,
        });
    }
    PhantomSpec { image_side, circles }
}

/// Fraction of pixel `(row, col)` covered by the disk, from 16×16
/// sub-samples on boundary pixels.
fn coverage(row: usize, col: usize, cx: f64, cy: f64, r: f64) -> f64 {
    let (x0, y0) = (col as f64, row as f64);
    let dx = (cx - (x0 + 0.5)).abs();
    let dy = (cy - (y0 + 0.5)).abs();
    let half_diag = std::f64::consts::FRAC_1_SQRT_2;
    let dist = dx.hypot(dy);
    if dist + half_diag <= r {
        return 1.0;
    }
    if dist - half_diag >= r {
        return 0.0;
    }
    const SUB: usize = 16;
    let mut hits = 0;
    for i in 0..SUB {
        for j in 0..SUB {
            let x = x0 + (j as f64 + 0.5) / SUB as f64;
            let y = y0 + (i as f64 + 0.5) / SUB as f64;
            if (x - cx).hypot(y - cy) <= r {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUB * SUB) as f64
}

/// Material-major images. Each circle blends into its own material channel
/// by its coverage, so a later circle overwrites earlier ones of the same
/// material where it lies.
pub fn render_phantom(spec: &PhantomSpec, n_materials: usize) -> Result<Vec<f64>> {
    spec.validate(n_materials)?;
    let n = spec.image_side;
    let mut x = vec![0.0; n * n * n_materials];
    for c in &spec.circles {
        let s = n as f64;
        let (cx, cy, r) = (c.center_x * s, c.center_y * s, c.radius * s);
        let channel = &mut x[c.material * n * n..(c.material + 1) * n * n];
        let lo = |v: f64| (v - r - 1.0).floor().max(0.0) as usize;
        let hi = |v: f64| ((v + r + 1.0).ceil() as usize).min(n);
        for row in lo(cy)..hi(cy) {
            for col in lo(cx)..hi(cx) {
                let f = coverage(row, col, cx, cy, r);
                if f > 0.0 {
                    let px = &mut channel[row * n + col];
                    *px = (1.0 - f) * *px + f * c.concentration;
                }
            }
        }
    }
    Ok(x)
}

/// Average `factor × factor` cells of every channel.
pub fn downsample(x: &[f64], side: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || !side.is_multiple_of(factor) || !x.len().is_multiple_of(side * side) {
        return Err(Error::Parameter(format!(
            "cannot bin {} values of side {side} by {factor}",
            x.len()
        )));
    }
    let coarse = side / factor;
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(x.len() / (factor * factor));
    for ch in x.chunks_exact(side * side) {
        for row in 0..coarse {
            for col in 0..coarse {
                let mut acc = 0.0;
                for i in 0..factor {
                    let base = (row * factor + i) * side + col * factor;
                    acc += ch[base..base + factor].iter().sum::<f64>();
                }
                out.push(acc * norm);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub per_material: Vec<f64>,
    pub overall: f64,
}

/// Root-mean-square difference per material channel and overall.
pub fn rmse(x: &[f64], truth: &[f64], n_materials: usize) -> Result<Rmse> {
    check_len("rmse images", truth.len(), x.len())?;
    if n_materials == 0 || !x.len().is_multiple_of(n_materials) || x.is_empty() {
        return Err(Error::Parameter("images do not split into material channels".into()));
    }
    let per = x.len() / n_materials;
    let msd = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(Rmse {
        per_material: x
            .chunks_exact(per)
            .zip(truth.chunks_exact(per))
            .map(|(a, b)| msd(a, b).sqrt())
            .collect(),
        overall: msd(x, truth).sqrt(),
    })
}
