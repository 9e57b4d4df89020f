use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use stodev::development::{develop, DrivingPath};
use stodev::experiments::{check, make_study, run_frame_study, run_recovery_study, StudyConfig, StudyKind};
use stodev::geometry::{Manifold, ManifoldConfig};
use stodev::inference::{fit, FitConfig, FitDiagnostics};
use stodev::io::{load_dataset, read_json, write_json, write_matrix_csv, Manifest, ThetaFile};
use nalgebra::DMatrix;

#[derive(Parser)]
#[command(name = "stodev", version, about = "Regression of manifold-valued shapes by stochastic development")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Circle8,
    Frame3,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Recovery,
    Frame,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a study dataset.
    Simulate {
        #[arg(long, value_enum)]
        study: Study,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model to a dataset by Laplace-approximated maximum likelihood.
    Fit {
        #[arg(long)]
        shapes: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Develop a driving path from the frame point of a parameter file.
    Develop {
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the geometry and inference self-checks.
    Check {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a replicated simulation study.
    Study {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the replicate count of the configuration.
        #[arg(long)]
        replicates: Option<usize>,
    },
}

/// Contents of the `fit --config` file.
#[derive(Debug, Serialize, Deserialize)]
struct FitFile {
    manifold: ManifoldConfig,
    #[serde(default)]
    fit: FitConfig,
    /// Starting parameters; least squares when absent.
    #[serde(default)]
    init: Option<ThetaFile>,
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    log_likelihood: f64,
    #[serde(flatten)]
    diagnostics: &'a FitDiagnostics,
}

/// Contents of the `develop --path` file.
#[derive(Debug, Serialize, Deserialize)]
struct PathFile {
    manifold: ManifoldConfig,
    /// One row of increments per step.
    increments: Vec<Vec<f64>>,
    #[serde(default = "one")]
    total_time: f64,
    #[serde(default = "four")]
    substeps: usize,
}

fn one() -> f64 {
    1.0
}

fn four() -> usize {
    4
}

/// `report.json` -> `report.manifest.json`, for commands whose output is a file.
fn manifest_beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn simulate(study: Study, n: usize, seed: u64, out: &Path) -> Result<()> {
    let config = StudyConfig {
        study: match study {
            Study::Circle8 => StudyKind::Circle8,
            Study::Frame3 => StudyKind::Frame3,
        },
        n,
        seed,
        ..StudyConfig::default()
    };
    make_study(&config, out)?;
    Ok(())
}

fn run_fit(shapes: &Path, covariates: &Path, spec: &Path, config: &Path, out: &Path) -> Result<()> {
    let file: FitFile = read_json(config).with_context(|| format!("reading {}", config.display()))?;
    let model = Manifold::from_config(&file.manifold)?;
    let data = load_dataset(shapes, covariates, spec)?;
    let init = file.init.as_ref().map(|t| t.to_parameters(&model)).transpose()?;
    let result = fit(&model, &data, &file.fit, init.as_ref())?;

    let theta = &result.theta_hat;
    let mut residuals = DMatrix::zeros(data.len(), data.ambient_dim());
    for (i, block) in result.inner_modes.blocks().into_iter().enumerate() {
        let path = DrivingPath::new(block, file.fit.total_time)?;
        let dev = develop(&model, &theta.frame_point(), &path, file.fit.substeps)?;
        let end = model.embed(dev.base_points.last().expect("path has a start"))?;
        residuals.set_row(i, &(data.response(i) - end).transpose());
    }

    std::fs::create_dir_all(out)?;
    write_json(&out.join("theta_hat.json"), &ThetaFile::from_parameters(theta))?;
    write_json(
        &out.join("diagnostics.json"),
        &DiagnosticsFile {
            log_likelihood: result.log_likelihood,
            diagnostics: &result.diagnostics,
        },
    )?;
    write_matrix_csv(&out.join("residuals.csv"), &residuals)?;
    write_json(
        &out.join("manifest.json"),
        &Manifest::new(
            "fit",
            Some(file.fit.seed),
            serde_json::json!({
                "run": file,
                "shapes": shapes,
                "covariates": covariates,
                "spec": spec,
            }),
        ),
    )?;
    Ok(())
}

fn run_develop(theta: &Path, path: &Path, out: &Path) -> Result<()> {
    let input: PathFile = read_json(path).with_context(|| format!("reading {}", path.display()))?;
    let model = Manifold::from_config(&input.manifold)?;
    let theta_file: ThetaFile = read_json(theta).with_context(|| format!("reading {}", theta.display()))?;
    let params = theta_file.to_parameters(&model)?;
    let width = input.increments.first().map_or(0, Vec::len);
    if input.increments.is_empty() || input.increments.iter().any(|r| r.len() != width) {
        bail!("increments must be a non-empty rectangular list of rows");
    }
    let inc = DMatrix::from_fn(input.increments.len(), width, |t, j| input.increments[t][j]);
    let dev = develop(
        &model,
        &params.frame_point(),
        &DrivingPath::new(inc, input.total_time)?,
        input.substeps,
    )?;
    let rows = dev
        .base_points
        .iter()
        .map(|p| model.embed(p).map(|e| e.transpose()))
        .collect::<stodev::Result<Vec<_>>>()?;
    create_parent(out)?;
    write_matrix_csv(out, &DMatrix::from_rows(&rows))?;
    write_json(
        &manifest_beside(out),
        &Manifest::new("develop", None, serde_json::json!({ "theta": theta_file, "path": input })),
    )?;
    Ok(())
}

fn run_check(out: &Path) -> Result<bool> {
    let report = check();
    create_parent(out)?;
    write_json(out, &report)?;
    write_json(&manifest_beside(out), &Manifest::new("check", None, serde_json::Value::Null))?;
    for e in &report.entries {
        println!("{:<40} {} {:e} ({})", e.name, if e.passed { "pass" } else { "FAIL" }, e.value, e.threshold);
    }
    Ok(report.all_passed)
}

fn run_study(kind: Kind, config: &Path, out: &Path, replicates: Option<usize>) -> Result<()> {
    let mut cfg: StudyConfig = read_json(config).with_context(|| format!("reading {}", config.display()))?;
    if replicates.is_some() {
        cfg.replicates = replicates;
    }
    std::fs::create_dir_all(out)?;
    let command = match kind {
        Kind::Recovery => {
            write_json(&out.join("report.json"), &run_recovery_study(&cfg)?)?;
            "study recovery"
        }
        Kind::Frame => {
            write_json(&out.join("report.json"), &run_frame_study(&cfg)?)?;
            "study frame"
        }
    };
    write_json(
        &out.join("manifest.json"),
        &Manifest::new(command, Some(cfg.seed), serde_json::to_value(&cfg)?),
    )?;
    Ok(())
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Simulate { study, n, seed, out } => simulate(study, n, seed, &out)?,
        Command::Fit {
            shapes,
            covariates,
            spec,
            config,
            out,
        } => run_fit(&shapes, &covariates, &spec, &config, &out)?,
        Command::Develop { theta, path, out } => run_develop(&theta, &path, &out)?,
        Command::Check { out } => {
            if !run_check(&out)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Study {
            kind,
            config,
            out,
            replicates,
        } => run_study(kind, &config, &out, replicates)?,
    }
    Ok(ExitCode::SUCCESS)
}
