//! Run configuration and the simulate / reconstruct pipelines shared by the
//! command-line tool and the end-to-end tests.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{check_len, Error, Result};
use crate::operators::{CountingOperator, FourierRadon, KroneckerMap, RadonGeometry, RayRadon, ViewOperator, WorkCounter};
use crate::phantom::{desk_phantom, downsample, render_phantom, PhantomSpec};
use crate::red::{DenoiserSpec, RedConfig};
use crate::sketch::{bin_mean_weights, ScoreEstimator};
use crate::solver::{denoising_ihs, wls_baseline, DataTerm, Problem, Sampling, SolveResult, SolverConfig};
use crate::spectral::{log_linearize, simulate_counts, MaterialBasis, SpectralMeasurement, SpectrumTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub image_side: usize,
    pub n_views: usize,
    /// Defaults to enough detectors to cover the image diagonal.
    pub n_detectors: Option<usize>,
    /// Pixel edge in cm.
    pub pixel_size: f64,
    /// Defaults to the pixel size.
    pub detector_spacing: Option<f64>,
    /// Explicit view angles in radians; defaults to `n_views` equispaced
    /// angles in `[0, π)`.
    pub angles: Option<Vec<f64>>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            n_views: 60,
            n_detectors: None,
            pixel_size: 0.1,
            detector_spacing: None,
            angles: None,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<RadonGeometry> {
        let spacing = self.detector_spacing.unwrap_or(self.pixel_size);
        let n_det = self
            .n_detectors
            .unwrap_or_else(|| RadonGeometry::covering_detectors(self.image_side, self.pixel_size, spacing));
        let angles = match &self.angles {
            Some(a) => {
                if a.len() != self.n_views {
                    return Err(Error::Config(format!(
                        "geometry.angles has {} entries but n_views = {}",
                        a.len(),
                        self.n_views
                    )));
                }
                a.clone()
            }
            None => crate::operators::uniform_angles(self.n_views),
        };
        RadonGeometry::new(self.image_side, n_det, angles, spacing, self.pixel_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    /// Column name in the attenuation table.
    pub name: String,
    /// Density (g/ml) represented by one image unit.
    pub unit_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Poisson seed; `null` simulates noiseless mean counts.
    pub seed: Option<u64>,
    /// Mean open-beam count per bin and detector.
    pub i0: f64,
    /// Simulation grid refinement factor.
    pub refinement: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            seed: Some(1),
            i0: 2e3,
            refinement: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedBlock {
    pub denoiser: DenoiserSpec,
    pub nu: f64,
    pub fd_epsilon_scale: f64,
    pub mc_probes: usize,
}

impl Default for RedBlock {
    fn default() -> Self {
        let base = RedConfig::default();
        Self {
            denoiser: DenoiserSpec::GaussianBlur { sigma: 1.0 },
            nu: 0.05,
            fd_epsilon_scale: base.fd_epsilon_scale,
            mc_probes: base.mc_probes,
        }
    }
}

impl RedBlock {
    pub fn red_config(&self) -> RedConfig {
        RedConfig {
            nu: self.nu,
            fd_epsilon_scale: self.fd_epsilon_scale,
            mc_probes: self.mc_probes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    Leverage,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketchConfig {
    pub sampling: SamplingKind,
    /// Hutchinson probes for the surrogate leverage scores.
    pub probes: usize,
    pub seed: u64,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingKind::Leverage,
            probes: ScoreEstimator::DEFAULT_PROBES,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DenoisingIhs,
    /// Full-Hessian weighted least squares with an optional quadratic
    /// smoothness penalty.
    Wls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    Ray,
    Fourier,
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub spectrum_file: PathBuf,
    pub materials_file: PathBuf,
    pub materials: Vec<MaterialSpec>,
    /// Defaults to the desk phantom at the geometry's image side.
    pub phantom: Option<PhantomSpec>,
    pub noise: NoiseConfig,
    pub red: RedBlock,
    pub sketch: SketchConfig,
    pub solver: SolverConfig,
    pub method: Method,
    pub wls_smoothness: f64,
    pub projector: ProjectorKind,
    pub output_dir: PathBuf,
    /// Worker threads for the numerical kernels (`null` = all cores).
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            spectrum_file: PathBuf::from("data/spectrum.csv"),
            materials_file: PathBuf::from("data/materials.csv"),
            materials: vec![
                MaterialSpec {
                    name: "water".into(),
                    unit_scale: 1.0,
                },
                MaterialSpec {
                    name: "iodine".into(),
                    unit_scale: 0.01,
                },
                MaterialSpec {
                    name: "gadolinium".into(),
                    unit_scale: 0.01,
                },
            ],
            phantom: None,
            noise: NoiseConfig::default(),
            red: RedBlock::default(),
            sketch: SketchConfig::default(),
            solver: SolverConfig {
                max_outer: 30,
                cg_max_iters: 5,
                ..SolverConfig::default()
            },
            method: Method::DenoisingIhs,
            wls_smoothness: 0.0,
            projector: ProjectorKind::Ray,
            output_dir: PathBuf::from("runs/desk"),
            threads: None,
        }
    }
}

/// Overlay `over` onto `base` key by key. Objects naming a different
/// variant (`name`) replace the base object instead of merging into it.
fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let switches = matches!((b.get("name"), o.get("name")), (Some(x), Some(y)) if x != y);
            if switches {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Set `path` (dot separated) inside a JSON document to `raw`, parsed as
/// JSON when possible and as a string otherwise. Missing objects along the
/// path are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` has an empty segment")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{key}` is not inside an object")))?;
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{path}` does not address an object field")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse a JSON document, apply overrides and resolve relative file
    /// paths against `base_dir`.
    pub fn from_json(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        // parsed once on its own so that type errors carry line and column
        serde_json::from_str::<RunConfig>(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        let mut user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let mut doc = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_json(&mut doc, user);
        let mut cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.spectrum_file, &mut self.materials_file, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.geometry.build()?;
        self.solver.validate()?;
        self.red.red_config().validate()?;
        if self.materials.is_empty() {
            return cfg_err("at least one material is required".into());
        }
        for f in [&self.spectrum_file, &self.materials_file] {
            if !f.is_file() {
                return cfg_err(format!("file not found: {}", f.display()));
            }
        }
        if !(self.noise.i0 > 0.0 && self.noise.i0.is_finite()) {
            return cfg_err("noise.i0 must be positive".into());
        }
        if self.noise.refinement == 0 {
            return cfg_err("noise.refinement must be at least 1".into());
        }
        if self.sketch.probes == 0 {
            return cfg_err("sketch.probes must be at least 1".into());
        }
        if !(self.wls_smoothness >= 0.0) {
            return cfg_err("wls_smoothness must be non-negative".into());
        }
        if self.threads == Some(0) {
            return cfg_err("threads must be at least 1".into());
        }
        if let Some(p) = &self.phantom {
            if p.image_side != self.geometry.image_side {
                return cfg_err(format!(
                    "phantom.image_side {} differs from geometry.image_side {}",
                    p.image_side, self.geometry.image_side
                ));
            }
            p.validate(self.materials.len())?;
        }
        Ok(())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        self.phantom
            .clone()
            .unwrap_or_else(|| desk_phantom(self.geometry.image_side))
    }
}

/// A resolved configuration: geometry, tables and ground truth.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub geometry: RadonGeometry,
    pub spectrum: SpectrumTable,
    pub basis: MaterialBasis,
    /// Diagonal `S_bb` of the inversion model.
    pub bin_flux: Vec<f64>,
    /// Bin-averaged attenuation `C_eff` (`N_b × N_m`).
    pub mixing: DMatrix<f64>,
    /// Ground truth on the reconstruction grid, material-major.
    pub truth: Vec<f64>,
}

/// Output of [`Experiment::reconstruct`].
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub result: SolveResult,
    pub measurement: SpectralMeasurement,
    /// Seconds spent preparing the surrogate leverage scores.
    pub score_setup_s: f64,
    pub view_touches: Vec<u64>,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry.build()?;
        let spectrum = SpectrumTable::from_csv(&config.spectrum_file)?.with_mean_bin_flux(config.noise.i0)?;
        let materials: Vec<(String, f64)> = config
            .materials
            .iter()
            .map(|m| (m.name.clone(), m.unit_scale))
            .collect();
        let basis = MaterialBasis::from_csv(&config.materials_file, &materials, spectrum.energies())?;
        let (bin_flux, mixing) = spectrum.collapse(&basis)?;
        let truth = downsample(&Self::fine_truth_of(&config)?, geometry.image_side * config.noise.refinement, config.noise.refinement)?;
        Ok(Self {
            config,
            geometry,
            spectrum,
            basis,
            bin_flux,
            mixing,
            truth,
        })
    }

    fn fine_truth_of(config: &RunConfig) -> Result<Vec<f64>> {
        let r = config.noise.refinement;
        let spec = config.phantom_spec();
        render_phantom(&spec.with_side(spec.image_side * r), config.materials.len())
    }

    pub fn n_materials(&self) -> usize {
        self.basis.n_materials()
    }

    pub fn n_bins(&self) -> usize {
        self.spectrum.n_bins()
    }

    /// Photon counts simulated on the refined grid (bin-major).
    pub fn simulate(&self) -> Result<Vec<f64>> {
        let r = self.config.noise.refinement;
        let fine = Self::fine_truth_of(&self.config)?;
        let radon = RayRadon::new(self.geometry.refined(r));
        simulate_counts(&self.spectrum, &self.basis, &radon, &fine, self.config.noise.seed)
    }

    fn projector(&self) -> Arc<CountingOperator<Arc<dyn ViewOperator>>> {
        let inner: Arc<dyn ViewOperator> = match self.config.projector {
            ProjectorKind::Ray => Arc::new(RayRadon::new(self.geometry.clone())),
            ProjectorKind::Fourier => Arc::new(FourierRadon::new(self.geometry.clone())),
        };
        Arc::new(CountingOperator::new(inner))
    }

    /// The system operator `A = C_eff ⊗ R` and the projector tally.
    pub fn system(&self) -> (KroneckerMap, Arc<WorkCounter>) {
        let radon = self.projector();
        let counter = radon.counter();
        (KroneckerMap::new(self.mixing.clone(), radon), counter)
    }

    /// Log-linearize `counts` and run the configured solver from zero.
    pub fn reconstruct(&self, counts: &[f64]) -> Result<Reconstruction> {
        check_len("counts", self.n_bins() * self.geometry.n_rays(), counts.len())?;
        let meas = log_linearize(&self.bin_flux, counts)?;
        let (a, counter) = self.system();
        let data = DataTerm::from_measurement(&meas, a)?;
        let red = self.config.red.red_config();
        let denoiser = self.config.red.denoiser.build(self.geometry.image_side)?;
        let weights = bin_mean_weights(&meas.inv_cov_diag, self.n_bins())?;
        let cfg = &self.config.solver;
        let started = Instant::now();
        let estimator = match (self.config.method, self.config.sketch.sampling, cfg.full_hessian_mode) {
            (Method::DenoisingIhs, SamplingKind::Leverage, false) => Some(ScoreEstimator::new(
                &self.geometry,
                self.config.sketch.probes,
                self.config.sketch.seed,
            )?),
            _ => None,
        };
        let score_setup_s = started.elapsed().as_secs_f64();
        let sampling = match &estimator {
            Some(estimator) => Sampling::Surrogate {
                estimator,
                mixing: &self.mixing,
                bin_weights: &weights,
            },
            None => Sampling::Uniform,
        };
        let problem = Problem {
            data: &data,
            denoiser: denoiser.as_ref(),
            red: &red,
            sampling,
            counter: Some(&counter),
            truth: Some(&self.truth),
            n_materials: self.n_materials(),
        };
        let x0 = vec![0.0; self.truth.len()];
        let result = match self.config.method {
            Method::DenoisingIhs => denoising_ihs(&problem, cfg, &x0)?,
            Method::Wls => wls_baseline(&problem, self.geometry.image_side, self.config.wls_smoothness, cfg, &x0)?,
        };
        Ok(Reconstruction {
            result,
            measurement: meas,
            score_setup_s,
            view_touches: counter.view_touches(),
        })
    }
}

/// The repository's `data/` directory (for tests and examples).
pub fn bundled_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_edit_nested_fields() {
        let mut doc: Value = serde_json::json!({"solver": {"max_outer": 3}});
        apply_override(&mut doc, "solver.max_outer=7").unwrap();
        apply_override(&mut doc, "red.denoiser.name=identity").unwrap();
        apply_override(&mut doc, "noise.seed=null").unwrap();
        assert_eq!(doc["solver"]["max_outer"], 7);
        assert_eq!(doc["red"]["denoiser"]["name"], "identity");
        assert!(doc["noise"]["seed"].is_null());
        assert!(apply_override(&mut doc, "solver.max_outer").is_err());
        assert!(apply_override(&mut doc, "solver.max_outer.x=1").is_err());
    }

    #[test]
    fn default_config_resolves_bundled_tables() {
        let cfg = RunConfig::from_json("{}", &[], &bundled_data_dir().join("..")).unwrap();
        let exp = Experiment::new(cfg).unwrap();
        assert_eq!(exp.mixing.shape(), (3, 3));
        assert!((exp.bin_flux.iter().sum::<f64>() / 3.0 - 2e3).abs() < 1e-9);
        assert_eq!(exp.truth.len(), 3 * 64 * 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json("{\"solver\": {\"max_iter\": 3}}", &[], &bundled_data_dir().join(".."));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn partial_blocks_keep_run_defaults() {
        let base = bundled_data_dir().join("..");
        let cfg = RunConfig::from_json("{\"solver\": {\"seed\": 4}}", &["red.denoiser.sigma=2".into()], &base).unwrap();
        assert_eq!(cfg.solver.seed, 4);
        assert_eq!(cfg.solver.cg_max_iters, RunConfig::default().solver.cg_max_iters);
        assert!(matches!(cfg.red.denoiser, DenoiserSpec::GaussianBlur { sigma, .. } if sigma == 2.0));
        let cfg = RunConfig::from_json("{}", &["red.denoiser.name=identity".into()], &base).unwrap();
        assert!(matches!(cfg.red.denoiser, DenoiserSpec::Identity));
    }

    #[test]
    fn type_errors_report_position() {
        let err = RunConfig::from_json("{\n  \"solver\": {\"seed\": \"x\"}\n}", &[], &bundled_data_dir().join(".."));
        match err {
            Err(Error::Config(m)) => assert!(m.contains("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
