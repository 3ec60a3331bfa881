use std::path::{Path, PathBuf};

use redsketch::experiment::{Experiment, Method, RunConfig, SamplingKind};
use redsketch::operators::materialize;
use redsketch::phantom::rmse;
use redsketch::red::ridge_penalty_scalar;
use redsketch::sketch::{bin_mean_weights, block_scores_of, ridge_scores_exact, total_variation, ScoreEstimator};
use redsketch::solver::SolveStatus;
use redsketch::spectral::{log_linearize, sqrt_hessian};
use redsketch::LinearMap;
use serde_json::{json, Value};

use crate::output::{cost_vs_work_svg, read_f32, write_f32, write_pgm, Series};
use crate::ConfigArgs;

const META_FORMAT: &str = "redsketch-run/1";
const NOISE_NOTE: &str = "counts are simulated with Poisson noise; the fit uses the Gaussian \
                          approximation of the log-transformed counts";

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_STALL: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<redsketch::Error> for CliError {
    fn from(e: redsketch::Error) -> Self {
        let code = match e {
            redsketch::Error::Io(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Load the configuration (a plain config or a run's meta.json) and set
/// the worker thread budget.
fn load(args: &ConfigArgs) -> CliResult<RunConfig> {
    let cfg = match &args.config {
        None => {
            let cwd = std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?;
            RunConfig::from_json("{}", &args.overrides, &cwd)?
        }
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let meta = serde_json::from_str::<Value>(&text)
                .ok()
                .filter(|v| v["format"] == META_FORMAT);
            let text = match meta {
                Some(v) => v["config"].to_string(),
                None => text,
            };
            RunConfig::from_json(&text, &args.overrides, base)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(n) = cfg.threads {
        // a second build in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
}

fn write_json(path: PathBuf, value: &Value) -> CliResult<()> {
    write(path, serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n")
}

fn meta(exp: &Experiment) -> Value {
    let g = &exp.geometry;
    json!({
        "format": META_FORMAT,
        "config": exp.config,
        "counts": {
            "file": "counts.bin",
            "dtype": "f32le",
            "shape": [exp.n_bins(), g.angles.len(), g.n_detectors],
            "axes": ["bin", "view", "detector"],
        },
        "truth": {
            "file": "truth.bin",
            "dtype": "f32le",
            "shape": [exp.n_materials(), g.image_side, g.image_side],
            "axes": ["material", "row", "column"],
        },
        "materials": exp.config.materials.iter().map(|m| &m.name).collect::<Vec<_>>(),
        "angles": g.angles,
        "bin_flux": exp.bin_flux,
        "noise_model": NOISE_NOTE,
    })
}

pub fn simulate(args: &ConfigArgs) -> CliResult<u8> {
    let exp = Experiment::new(load(args)?)?;
    let counts = exp.simulate()?;
    let dir = &exp.config.output_dir;
    create_dir(dir)?;
    write_f32(&dir.join("counts.bin"), &counts).map_err(|e| CliError::io(dir, e))?;
    write_f32(&dir.join("truth.bin"), &exp.truth).map_err(|e| CliError::io(dir, e))?;
    write_json(dir.join("meta.json"), &meta(&exp))?;
    println!("wrote {} counts to {}", counts.len(), dir.display());
    Ok(0)
}

fn read_counts(exp: &Experiment, counts: Option<&Path>) -> CliResult<Vec<f64>> {
    let path = counts.map(Path::to_path_buf).unwrap_or_else(|| exp.config.output_dir.join("counts.bin"));
    let values = read_f32(&path).map_err(|e| CliError::io(&path, e))?;
    let expected = exp.n_bins() * exp.geometry.n_rays();
    if values.len() != expected {
        return Err(CliError::config(format!(
            "{} holds {} counts but the configuration expects {expected}",
            path.display(),
            values.len()
        )));
    }
    Ok(values)
}

fn status_name(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Converged => "converged",
        SolveStatus::BudgetExhausted => "budget_exhausted",
        SolveStatus::Stalled => "stalled",
    }
}

fn sampling_name(cfg: &RunConfig) -> &'static str {
    match (cfg.method, cfg.solver.full_hessian_mode, cfg.sketch.sampling) {
        (Method::Wls, ..) | (_, true, _) => "full",
        (_, false, SamplingKind::Leverage) => "leverage",
        (_, false, SamplingKind::Uniform) => "uniform",
    }
}

pub fn reconstruct(args: &ConfigArgs, counts: Option<&Path>) -> CliResult<u8> {
    let exp = Experiment::new(load(args)?)?;
    let counts = read_counts(&exp, counts)?;
    let rec = exp.reconstruct(&counts)?;
    let res = &rec.result;
    let nm = exp.n_materials();
    let side = exp.geometry.image_side;
    let err = rmse(&res.x, &exp.truth, nm)?;

    let dir = &exp.config.output_dir;
    create_dir(dir)?;
    write_f32(&dir.join("recon.bin"), &res.x).map_err(|e| CliError::io(dir, e))?;
    write_f32(&dir.join("truth.bin"), &exp.truth).map_err(|e| CliError::io(dir, e))?;
    write(dir.join("iterations.csv"), res.to_csv())?;
    let mut views = String::from("view,angle_rad,projections\n");
    for (v, (a, t)) in exp.geometry.angles.iter().zip(&rec.view_touches).enumerate() {
        views.push_str(&format!("{v},{a},{t}\n"));
    }
    write(dir.join("views.csv"), views)?;

    let mut windows = Vec::new();
    for (m, (img, spec)) in res.x.chunks_exact(side * side).zip(&exp.config.materials).enumerate() {
        let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let path = dir.join(format!("recon_{m}_{}.pgm", spec.name));
        write_pgm(&path, img, side, lo, hi).map_err(|e| CliError::io(&path, e))?;
        windows.push(json!({"material": spec.name, "min": lo, "max": hi}));
    }
    let last = res.records.last().unwrap_or(&res.initial);
    let summary = json!({
        "status": status_name(res.status),
        "method": exp.config.method,
        "sampling": sampling_name(&exp.config),
        "outer_iterations": res.records.len(),
        "final_cost": res.final_cost(),
        "final_grad_norm": last.grad_norm,
        "rmse": err.overall,
        "rmse_per_material": exp.config.materials.iter().zip(&err.per_material)
            .map(|(m, r)| (m.name.clone(), json!(r))).collect::<serde_json::Map<_, _>>(),
        "row_accesses": res.total_row_accesses(),
        "wall_time_s": last.wall_time_s,
        "score_setup_s": rec.score_setup_s,
        "pgm_windows": windows,
        "noise_model": NOISE_NOTE,
    });
    write_json(dir.join("summary.json"), &summary)?;
    write_json(dir.join("meta.json"), &meta(&exp))?;
    println!(
        "{}: {} outer iterations, cost {:.6e}, rmse {:.4}, {} row accesses",
        status_name(res.status),
        res.records.len(),
        res.final_cost(),
        err.overall,
        res.total_row_accesses()
    );
    Ok(if res.status == SolveStatus::Stalled { EXIT_STALL } else { 0 })
}

struct RunDir {
    label: String,
    summary: Value,
    materials: Vec<String>,
    truth: Vec<u8>,
    points: Vec<(f64, f64)>,
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn read_run(dir: &Path) -> CliResult<RunDir> {
    let meta = read_json(&dir.join("meta.json"))?;
    let summary = read_json(&dir.join("summary.json"))?;
    let truth_path = dir.join("truth.bin");
    let truth = std::fs::read(&truth_path).map_err(|e| CliError::io(&truth_path, e))?;
    let csv_path = dir.join("iterations.csv");
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let headers = reader.headers().map_err(|e| CliError::io(&csv_path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::config(format!("{}: no `{name}` column", csv_path.display())))
    };
    let (c_cost, c_acc) = (col("cost")?, col("row_accesses")?);
    let mut points = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::io(&csv_path, e))?;
        let num = |i: usize| {
            row[i]
                .parse::<f64>()
                .map_err(|e| CliError::config(format!("{}: {e}", csv_path.display())))
        };
        points.push((num(c_acc)?, num(c_cost)?));
    }
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let materials = meta["materials"]
        .as_array()
        .map(|a| a.iter().filter_map(|m| m.as_str().map(String::from)).collect())
        .unwrap_or_default();
    Ok(RunDir {
        label,
        summary,
        materials,
        truth,
        points,
    })
}

pub fn compare(runs: &[PathBuf], out: &Path) -> CliResult<u8> {
    let runs: Vec<RunDir> = runs.iter().map(|d| read_run(d)).collect::<CliResult<_>>()?;
    let first = &runs[0];
    for r in &runs[1..] {
        if r.truth != first.truth || r.materials != first.materials {
            return Err(CliError::config(format!(
                "runs `{}` and `{}` reconstruct different phantoms",
                first.label, r.label
            )));
        }
    }
    let num = |v: &Value| v.as_f64().map(|x| format!("{x:e}")).unwrap_or_default();
    let mut csv = String::from("run,method,sampling,status,outer_iterations,final_cost,rmse,row_accesses,wall_time_s");
    for m in &first.materials {
        csv.push_str(&format!(",rmse_{m}"));
    }
    csv.push('\n');
    let mut md = format!("| run | {} | overall |\n|---|", first.materials.join(" | "));
    md.push_str(&"---:|".repeat(first.materials.len() + 1));
    md.push('\n');
    for r in &runs {
        let s = &r.summary;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            s["method"].as_str().unwrap_or(""),
            s["sampling"].as_str().unwrap_or(""),
            s["status"].as_str().unwrap_or(""),
            s["outer_iterations"],
            num(&s["final_cost"]),
            num(&s["rmse"]),
            s["row_accesses"],
            num(&s["wall_time_s"]),
        ));
        md.push_str(&format!("| {} |", r.label));
        for m in &first.materials {
            let v = &s["rmse_per_material"][m];
            csv.push_str(&format!(",{}", num(v)));
            md.push_str(&format!(" {:.4} |", v.as_f64().unwrap_or(f64::NAN)));
        }
        csv.push('\n');
        md.push_str(&format!(" {:.4} |\n", s["rmse"].as_f64().unwrap_or(f64::NAN)));
    }
    let series: Vec<Series> = runs
        .iter()
        .map(|r| Series {
            label: r.label.clone(),
            points: r.points.clone(),
        })
        .collect();
    create_dir(out)?;
    write(out.join("comparison.csv"), csv)?;
    write(out.join("rmse_table.md"), md)?;
    write(out.join("cost_vs_work.svg"), cost_vs_work_svg(&series))?;
    println!("compared {} runs into {}", runs.len(), out.display());
    Ok(0)
}

/// Operators with more entries than this are not materialized for `--exact`.
const MAX_DENSE_ENTRIES: usize = 60_000_000;

pub fn scores(args: &ConfigArgs, counts: Option<&Path>, exact: bool) -> CliResult<u8> {
    let exp = Experiment::new(load(args)?)?;
    let counts = read_counts(&exp, counts)?;
    let cfg = &exp.config;
    let meas = log_linearize(&exp.bin_flux, &counts)?;
    let weights = bin_mean_weights(&meas.inv_cov_diag, exp.n_bins())?;
    let red = cfg.red.red_config();
    let denoiser = cfg.red.denoiser.build(exp.geometry.image_side)?;
    let x0 = vec![0.0; exp.truth.len()];
    let lambda = match cfg.method {
        Method::DenoisingIhs => ridge_penalty_scalar(denoiser.as_ref(), &red, &x0, cfg.sketch.seed),
        Method::Wls => 0.0,
    };
    let estimator = ScoreEstimator::new(&exp.geometry, cfg.sketch.probes, cfg.sketch.seed)?;
    let approx = estimator.estimate(&exp.mixing, &weights, lambda)?;
    let approx_p = approx.probabilities();

    let exact_scores = if exact {
        let (a, _) = exp.system();
        let b = sqrt_hessian(&meas, a)?;
        if b.rows() * b.cols() > MAX_DENSE_ENTRIES {
            return Err(CliError::config(format!(
                "--exact needs a dense {}x{} operator; reduce the geometry",
                b.rows(),
                b.cols()
            )));
        }
        let rows = ridge_scores_exact(&materialize(&b), lambda);
        Some(block_scores_of(&b, &rows, lambda)?)
    } else {
        None
    };

    let mut csv = String::from("view,angle_rad,score,probability");
    if exact_scores.is_some() {
        csv.push_str(",exact_score,exact_probability");
    }
    csv.push('\n');
    let exact_p = exact_scores.as_ref().map(|s| s.probabilities());
    for (v, angle) in exp.geometry.angles.iter().enumerate() {
        csv.push_str(&format!("{v},{angle},{:e},{:e}", approx.per_block[v], approx_p[v]));
        if let (Some(s), Some(p)) = (&exact_scores, &exact_p) {
            csv.push_str(&format!(",{:e},{:e}", s.per_block[v], p[v]));
        }
        csv.push('\n');
    }
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write(dir.join("scores.csv"), csv)?;
    println!("ridge {lambda:.6e}, estimated score sum {:.4}", approx.total());
    if let (Some(s), Some(p)) = (&exact_scores, &exact_p) {
        println!(
            "exact score sum {:.4}, total variation to exact distribution {:.4}",
            s.total(),
            total_variation(&approx_p, p)
        );
    }
    Ok(0)
}
