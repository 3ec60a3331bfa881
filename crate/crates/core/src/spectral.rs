//! Spectral measurement model, log-linearization and the weighted
//! least-squares data term.
//!
//! Forward model: `p_i^k = Σ_e S[k, e] · exp(-[R X Cᵀ]_{i, e})` with
//! `S = D ⊙ s`. For inversion each bin is collapsed to a single effective
//! energy (diagonal `S`), giving the linear model `y = (C_eff ⊗ R) x` with
//! `y = -log(p / S_kk)` and inverse covariance `Σ⁻¹ = diag(p)`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, Poisson};

use crate::error::{check_len, Error, Result};
use crate::operators::{BlockOperator, LinearMap};

/// Source spectrum and detector response on a common energy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTable {
    energies: Vec<f64>,
    flux: Vec<f64>,
    response: DMatrix<f64>,
}

impl SpectrumTable {
    /// `response` is `N_b × N_e`.
    pub fn new(energies: Vec<f64>, flux: Vec<f64>, response: DMatrix<f64>) -> Result<Self> {
        let ne = energies.len();
        if ne == 0 {
            return Err(Error::Model("spectrum has no energies".into()));
        }
        check_len("spectrum flux", ne, flux.len())?;
        check_len("detector response columns", ne, response.ncols())?;
        if response.nrows() == 0 {
            return Err(Error::Model("spectrum has no energy bins".into()));
        }
        if energies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Model("spectrum energies must be strictly increasing".into()));
        }
        if flux.iter().chain(response.iter()).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Model("spectrum entries must be finite and non-negative".into()));
        }
        let table = Self {
            energies,
            flux,
            response,
        };
        let s = table.effective();
        for b in 0..s.nrows() {
            if s.row(b).iter().all(|&v| v <= 0.0) {
                return Err(Error::Model(format!("energy bin {} receives no photons", b + 1)));
            }
        }
        Ok(table)
    }

    /// Single-energy table with `S = diag(flux)`.
    pub fn monochromatic(energies: Vec<f64>, flux: Vec<f64>) -> Result<Self> {
        let n = flux.len();
        Self::new(energies, flux, DMatrix::identity(n, n))
    }

    /// Read `energy_keV,flux,bin_1,...,bin_Nb`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let (header, rows) = read_table(path)?;
        if header.len() < 3 || header[0] != "energy_keV" || header[1] != "flux" {
            return Err(table_err(path, "header must be energy_keV,flux,bin_1,...".into()));
        }
        let nb = header.len() - 2;
        let energies = rows.iter().map(|r| r[0]).collect();
        let flux = rows.iter().map(|r| r[1]).collect();
        let response = DMatrix::from_fn(nb, rows.len(), |b, e| rows[e][b + 2]);
        Self::new(energies, flux, response).map_err(|e| table_err(path, e.to_string()))
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn flux(&self) -> &[f64] {
        &self.flux
    }

    pub fn response(&self) -> &DMatrix<f64> {
        &self.response
    }

    pub fn n_bins(&self) -> usize {
        self.response.nrows()
    }

    pub fn n_energies(&self) -> usize {
        self.energies.len()
    }

    /// The same table with the flux rescaled so that it sums to `total`.
    pub fn with_total_flux(&self, total: f64) -> Result<Self> {
        let sum: f64 = self.flux.iter().sum();
        if !(total > 0.0 && sum > 0.0) {
            return Err(Error::Parameter("total flux must be positive".into()));
        }
        let flux = self.flux.iter().map(|f| f * total / sum).collect();
        Self::new(self.energies.clone(), flux, self.response.clone())
    }

    /// The same table with the flux rescaled so that the open-beam count
    /// `S_bb`, averaged over bins, equals `mean`.
    pub fn with_mean_bin_flux(&self, mean: f64) -> Result<Self> {
        let current = self.effective().row_iter().map(|r| r.sum()).sum::<f64>() / self.n_bins() as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::Parameter("mean bin flux must be positive".into()));
        }
        let flux = self.flux.iter().map(|f| f * mean / current).collect();
        Self::new(self.energies.clone(), flux, self.response.clone())
    }

    /// `S = D ⊙ s`, one row per bin.
    pub fn effective(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_bins(), self.n_energies(), |b, e| {
            self.response[(b, e)] * self.flux[e]
        })
    }

    /// Diagonal inversion model: `S_bb = Σ_e S[b, e]` and the flux-weighted
    /// bin average of the attenuation, `C_eff[b, m] = Σ_e S[b, e] C[e, m] / S_bb`.
    pub fn collapse(&self, basis: &MaterialBasis) -> Result<(Vec<f64>, DMatrix<f64>)> {
        check_len("basis energies", self.n_energies(), basis.n_energies())?;
        let s = self.effective();
        let diag: Vec<f64> = s.row_iter().map(|r| r.sum()).collect();
        let mut c_eff = &s * basis.attenuation();
        for (b, d) in diag.iter().enumerate() {
            c_eff.row_mut(b).scale_mut(1.0 / d);
        }
        Ok((diag, c_eff))
    }
}

/// Attenuation of the basis materials on the spectrum's energy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialBasis {
    names: Vec<String>,
    attenuation: DMatrix<f64>,
}

impl MaterialBasis {
    /// `attenuation` is `N_e × N_m`.
    pub fn new(names: Vec<String>, attenuation: DMatrix<f64>) -> Result<Self> {
        check_len("material names", attenuation.ncols(), names.len())?;
        if names.is_empty() {
            return Err(Error::Model("at least one material is required".into()));
        }
        if attenuation.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Model("attenuation entries must be finite and non-negative".into()));
        }
        for i in 0..names.len() {
            for j in 0..i {
                if names[i] == names[j] || attenuation.column(i) == attenuation.column(j) {
                    return Err(Error::Model(format!(
                        "materials {} and {} are duplicates",
                        names[j], names[i]
                    )));
                }
            }
        }
        Ok(Self { names, attenuation })
    }

    /// Read `energy_keV,<material>...` and keep the listed materials, each
    /// column multiplied by its unit scale (density of one unit of the
    /// material image in g/ml). Values are linearly interpolated onto
    /// `energies`, which must lie inside the table range.
    pub fn from_csv(path: &Path, materials: &[(String, f64)], energies: &[f64]) -> Result<Self> {
        let (header, rows) = read_table(path)?;
        if header.first().map(String::as_str) != Some("energy_keV") {
            return Err(table_err(path, "header must start with energy_keV".into()));
        }
        let grid: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(table_err(path, "energies must be strictly increasing".into()));
        }
        let mut cols = Vec::with_capacity(materials.len());
        for (name, unit) in materials {
            let k = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| table_err(path, format!("no column named {name}")))?;
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            let mut out = Vec::with_capacity(energies.len());
            for &e in energies {
                let v = interpolate(&grid, &col, e)
                    .ok_or_else(|| table_err(path, format!("energy {e} keV outside table")))?;
                out.push(v * unit);
            }
            cols.push(out);
        }
        let att = DMatrix::from_fn(energies.len(), materials.len(), |e, m| cols[m][e]);
        let names = materials.iter().map(|(n, _)| n.clone()).collect();
        Self::new(names, att).map_err(|e| table_err(path, e.to_string()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn attenuation(&self) -> &DMatrix<f64> {
        &self.attenuation
    }

    pub fn n_materials(&self) -> usize {
        self.names.len()
    }

    pub fn n_energies(&self) -> usize {
        self.attenuation.nrows()
    }
}

fn interpolate(grid: &[f64], values: &[f64], e: f64) -> Option<f64> {
    let first = *grid.first()?;
    let last = *grid.last()?;
    if e < first - 1e-9 || e > last + 1e-9 {
        return None;
    }
    let k = grid.partition_point(|&g| g <= e);
    if k == 0 {
        return Some(values[0]);
    }
    if k >= grid.len() {
        return Some(values[grid.len() - 1]);
    }
    let (g0, g1) = (grid[k - 1], grid[k]);
    let t = (e - g0) / (g1 - g0);
    Some(values[k - 1] * (1.0 - t) + values[k] * t)
}

fn table_err(path: &Path, message: String) -> Error {
    Error::Table {
        path: path.to_path_buf(),
        message,
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| table_err(path, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| table_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| table_err(path, e.to_string()))?;
        let line = i + 2;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| table_err(path, format!("line {line}: cannot parse {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(table_err(path, format!("line {line}: wrong number of fields")));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(table_err(path, "table has no rows".into()));
    }
    Ok((header, rows))
}

/// Expected or Poisson-sampled photon counts for material images `x`
/// (material-major, `N_v · N_m`). The result is bin-major, then view, then
/// detector. `noise_seed = None` returns the noiseless means.
pub fn simulate_counts(
    spectrum: &SpectrumTable,
    basis: &MaterialBasis,
    radon: &dyn LinearMap,
    x: &[f64],
    noise_seed: Option<u64>,
) -> Result<Vec<f64>> {
    let nm = basis.n_materials();
    let nv = radon.cols();
    let rays = radon.rows();
    check_len("material image", nv * nm, x.len())?;
    check_len("basis energies", spectrum.n_energies(), basis.n_energies())?;
    if let Some(i) = x.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Model(format!(
            "material image entry {i} is negative or not finite"
        )));
    }
    let lines: Vec<Vec<f64>> = x.chunks_exact(nv).map(|xm| radon.apply(xm)).collect::<Result<_>>()?;
    let s = spectrum.effective();
    let c = basis.attenuation();
    let nb = spectrum.n_bins();
    let mut counts = vec![0.0; nb * rays];
    let mut expo = vec![0.0; rays];
    for e in 0..spectrum.n_energies() {
        expo.iter_mut().for_each(|v| *v = 0.0);
        for (m, l) in lines.iter().enumerate() {
            crate::linalg::axpy(c[(e, m)], l, &mut expo);
        }
        for b in 0..nb {
            let w = s[(b, e)];
            if w == 0.0 {
                continue;
            }
            for (p, a) in counts[b * rays..(b + 1) * rays].iter_mut().zip(&expo) {
                *p += w * (-a).exp();
            }
        }
    }
    if let Some(i) = counts.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Model(format!(
            "mean count {} at measurement {i} is not positive",
            counts[i]
        )));
    }
    if let Some(seed) = noise_seed {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for p in counts.iter_mut() {
            let d = Poisson::new(*p).map_err(|e| Error::Model(e.to_string()))?;
            *p = d.sample(&mut rng);
        }
    }
    Ok(counts)
}

/// Log-linearized data with its diagonal inverse covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMeasurement {
    pub counts: Vec<f64>,
    pub log_data: Vec<f64>,
    pub inv_cov_diag: Vec<f64>,
}

/// `p̃ = p / S_kk`, `y = -log p̃`, `Σ⁻¹_ii = p̃² S_kk² / p_i` (which equals
/// `p_i`). `bin_flux` holds the diagonal `S_kk`; counts are bin-major.
pub fn log_linearize(bin_flux: &[f64], counts: &[f64]) -> Result<SpectralMeasurement> {
    let nb = bin_flux.len();
    if nb == 0 || !counts.len().is_multiple_of(nb) {
        return Err(Error::Dimension {
            context: "counts per bin",
            expected: nb * (counts.len() / nb.max(1)),
            actual: counts.len(),
        });
    }
    if let Some(b) = bin_flux.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Model(format!("bin {b} has non-positive flux")));
    }
    let per_bin = counts.len() / nb;
    let mut log_data = Vec::with_capacity(counts.len());
    let mut inv_cov_diag = Vec::with_capacity(counts.len());
    for (i, &p) in counts.iter().enumerate() {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::NonPositiveCount { index: i, value: p });
        }
        let s = bin_flux[i / per_bin];
        let pt = p / s;
        log_data.push(-pt.ln());
        inv_cov_diag.push(pt * pt * s * s / p);
    }
    Ok(SpectralMeasurement {
        counts: counts.to_vec(),
        log_data,
        inv_cov_diag,
    })
}

/// `f(x) = ½ ‖A x − y‖²_{Σ⁻¹}`.
pub fn loss_eval(meas: &SpectralMeasurement, a: &dyn LinearMap, x: &[f64]) -> Result<f64> {
    let r = residual(meas, a, x)?;
    Ok(0.5 * r.iter().zip(&meas.inv_cov_diag).map(|(r, w)| w * r * r).sum::<f64>())
}

/// `∇f(x) = Aᵀ Σ⁻¹ (A x − y)`.
pub fn loss_gradient(meas: &SpectralMeasurement, a: &dyn LinearMap, x: &[f64]) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(meas, a, x)?.1)
}

/// Loss and gradient sharing one forward projection.
pub fn loss_and_gradient(
    meas: &SpectralMeasurement,
    a: &dyn LinearMap,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut r = residual(meas, a, x)?;
    let mut f = 0.0;
    for (ri, w) in r.iter_mut().zip(&meas.inv_cov_diag) {
        f += 0.5 * w * *ri * *ri;
        *ri *= w;
    }
    Ok((f, a.adjoint(&r)?))
}

fn residual(meas: &SpectralMeasurement, a: &dyn LinearMap, x: &[f64]) -> Result<Vec<f64>> {
    check_len("measurement length", a.rows(), meas.log_data.len())?;
    check_len("inverse covariance length", a.rows(), meas.inv_cov_diag.len())?;
    let mut r = a.apply(x)?;
    for (ri, yi) in r.iter_mut().zip(&meas.log_data) {
        *ri -= yi;
    }
    Ok(r)
}

/// The square-root Hessian `B = Σ^{-1/2} A` of the data term.
#[derive(Debug, Clone)]
pub struct SqrtHessian<A> {
    inner: A,
    scale: Vec<f64>,
}

/// `B = Σ^{-1/2} A`, so that `BᵀB = ∇²f`.
pub fn sqrt_hessian<A: LinearMap>(meas: &SpectralMeasurement, a: A) -> Result<SqrtHessian<A>> {
    check_len("inverse covariance length", a.rows(), meas.inv_cov_diag.len())?;
    if let Some(i) = meas.inv_cov_diag.iter().position(|w| !(*w > 0.0)) {
        return Err(Error::Model(format!("inverse covariance entry {i} is not positive")));
    }
    Ok(SqrtHessian {
        scale: meas.inv_cov_diag.iter().map(|w| w.sqrt()).collect(),
        inner: a,
    })
}

impl<A> SqrtHessian<A> {
    /// Row scaling `diag(Σ^{-1/2})`.
    pub fn row_scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn inner(&self) -> &A {
        &self.inner
    }
}

impl<A: LinearMap> LinearMap for SqrtHessian<A> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.inner.apply_into(x, y);
        for (yi, s) in y.iter_mut().zip(&self.scale) {
            *yi *= s;
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let scaled: Vec<f64> = y.iter().zip(&self.scale).map(|(a, b)| a * b).collect();
        self.inner.adjoint_into(&scaled, x);
    }
}

impl<A: BlockOperator> BlockOperator for SqrtHessian<A> {
    fn n_blocks(&self) -> usize {
        self.inner.n_blocks()
    }

    fn n_segments(&self) -> usize {
        self.inner.n_segments()
    }

    fn segment_rows(&self) -> usize {
        self.inner.segment_rows()
    }

    fn apply_blocks(&self, x: &[f64], blocks: &[usize], out: &mut [f64]) {
        self.inner.apply_blocks(x, blocks, out);
        self.for_each_block_row(blocks, |k, global| out[k] *= self.scale[global]);
    }

    fn adjoint_blocks(&self, data: &[f64], blocks: &[usize], out: &mut [f64]) {
        let mut scaled = data.to_vec();
        self.for_each_block_row(blocks, |k, global| scaled[k] *= self.scale[global]);
        self.inner.adjoint_blocks(&scaled, blocks, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{RadonGeometry, RayRadon};

    fn one_bin(i0: f64) -> SpectrumTable {
        SpectrumTable::monochromatic(vec![60.0], vec![i0]).unwrap()
    }

    fn one_material(c: f64) -> MaterialBasis {
        MaterialBasis::new(vec!["water".into()], DMatrix::from_element(1, 1, c)).unwrap()
    }

    #[test]
    fn zero_image_gives_open_beam() {
        let r = RayRadon::new(RadonGeometry::parallel(8, 4).unwrap());
        let p = simulate_counts(&one_bin(2000.0), &one_material(0.2), &r, &[0.0; 64], None).unwrap();
        assert!(p.iter().all(|&v| v == 2000.0));
    }

    #[test]
    fn monochromatic_beer_law() {
        let r = RayRadon::new(RadonGeometry::parallel(8, 4).unwrap());
        let x: Vec<f64> = (0..64).map(|i| (i % 7) as f64 * 0.1).collect();
        let p = simulate_counts(&one_bin(1e4), &one_material(0.3), &r, &x, None).unwrap();
        let rx = r.apply(&x).unwrap();
        for (pi, li) in p.iter().zip(&rx) {
            let want = 1e4 * (-0.3 * li).exp();
            assert!((pi - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn noise_is_reproducible() {
        let r = RayRadon::new(RadonGeometry::parallel(8, 4).unwrap());
        let x = vec![0.5; 64];
        let a = simulate_counts(&one_bin(500.0), &one_material(0.2), &r, &x, Some(9)).unwrap();
        let b = simulate_counts(&one_bin(500.0), &one_material(0.2), &r, &x, Some(9)).unwrap();
        let c = simulate_counts(&one_bin(500.0), &one_material(0.2), &r, &x, Some(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn negative_image_is_rejected() {
        let r = RayRadon::new(RadonGeometry::parallel(4, 2).unwrap());
        let mut x = vec![0.0; 16];
        x[3] = -1.0;
        assert!(simulate_counts(&one_bin(10.0), &one_material(0.2), &r, &x, None).is_err());
    }

    #[test]
    fn log_linearize_identity_flux() {
        let p = [3.0, 5.0, 0.5];
        let m = log_linearize(&[1.0], &p).unwrap();
        assert_eq!(m.inv_cov_diag, p.to_vec());
        assert_eq!(m.log_data, p.iter().map(|v: &f64| -v.ln()).collect::<Vec<_>>());
    }

    #[test]
    fn log_linearize_scalar_flux_weights_are_counts() {
        let p = [1200.0, 37.0, 5.0, 800.0];
        let m = log_linearize(&[2000.0, 1000.0], &p).unwrap();
        for (w, c) in m.inv_cov_diag.iter().zip(&p) {
            assert!((w - c).abs() <= 1e-12 * c);
        }
        assert!((m.log_data[3] - (-(0.8f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn zero_count_names_its_index() {
        match log_linearize(&[10.0], &[3.0, 0.0, 1.0]) {
            Err(Error::NonPositiveCount { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collapse_averages_within_bins() {
        let resp = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let spec = SpectrumTable::new(vec![20.0, 30.0, 40.0], vec![1.0, 3.0, 2.0], resp).unwrap();
        let basis = MaterialBasis::new(
            vec!["a".into(), "b".into()],
            DMatrix::from_row_slice(3, 2, &[4.0, 1.0, 2.0, 0.0, 1.0, 5.0]),
        )
        .unwrap();
        let (d, c) = spec.collapse(&basis).unwrap();
        assert_eq!(d, vec![4.0, 2.0]);
        assert!((c[(0, 0)] - 2.5).abs() < 1e-15);
        assert!((c[(0, 1)] - 0.25).abs() < 1e-15);
        assert_eq!((c[(1, 0)], c[(1, 1)]), (1.0, 5.0));
        let scaled = spec.with_mean_bin_flux(30.0).unwrap();
        let (d, _) = scaled.collapse(&basis).unwrap();
        assert!((d[0] - 40.0).abs() < 1e-12 && (d[1] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_materials_rejected() {
        let att = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(MaterialBasis::new(vec!["a".into(), "b".into()], att).is_err());
    }

    #[test]
    fn unit_residual_loss_is_half() {
        let a = DMatrix::<f64>::identity(3, 3);
        let meas = SpectralMeasurement {
            counts: vec![1.0; 3],
            log_data: vec![0.0, 2.0, 3.0],
            inv_cov_diag: vec![1.0; 3],
        };
        assert_eq!(loss_eval(&meas, &a, &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(loss_gradient(&meas, &a, &[0.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }
}
