//! Simulation studies, dataset ingest and the invariant self-check.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::development::{convergence_order, develop, develop_endpoint, DrivingPath};
use crate::error::{Error, Result};
use crate::frame::{frame_gram, orthonormalize_with_factor, FramePoint};
use crate::geometry::{christoffel_from_parts, Manifold, ManifoldConfig, Point, Tensor3};
use crate::inference::{fit, initial_parameters, EstimateFlags, FitConfig, FitResult, HessianMode, InitOptions};
use crate::io::{save_dataset, write_json, Manifest, ThetaFile};
use crate::process::{
    derive_seed, simulate_dataset, splitmix64, CovariateSpec, Dataset, ModelParameters, SamplingOptions,
    SimulationSettings,
};

const COVARIATE_STREAM: u64 = 0x636f_7661_7269_6174;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Circle8,
    Frame3,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub n: usize,
    pub seed: u64,
    /// Ambient noise; the study default when absent.
    pub tau: Option<f64>,
    pub kernel_sigma: Option<f64>,
    /// Brownian part of the driver; off gives the near-deterministic limit.
    pub brownian: bool,
    pub covariate_sd: f64,
    pub replicates: Option<usize>,
    /// Sample sizes of the single-fit convergence table.
    pub sizes: Vec<usize>,
    pub estimate: Option<EstimateFlags>,
    pub fit: FitConfig,
    /// Geometry and truth of a custom study.
    pub manifold: Option<ManifoldConfig>,
    pub truth: Option<ThetaFile>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            study: StudyKind::Circle8,
            n: 20,
            seed: 0,
            tau: None,
            kernel_sigma: None,
            brownian: true,
            covariate_sd: 2.0,
            replicates: None,
            sizes: vec![20, 60, 100],
            estimate: None,
            fit: FitConfig {
                hessian: HessianMode::GaussNewton,
                ..FitConfig::default()
            },
            manifold: None,
            truth: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if !(self.covariate_sd >= 0.0 && self.covariate_sd.is_finite()) {
            return Err(Error::InvalidConfig("covariate_sd must be nonnegative".into()));
        }
        if self.replicates == Some(0) || self.sizes.contains(&0) {
            return Err(Error::InvalidConfig("replicate counts and sizes must be positive".into()));
        }
        self.fit.validate()
    }

    pub fn estimate_flags(&self) -> EstimateFlags {
        self.estimate.unwrap_or(match self.study {
            StudyKind::Circle8 => EstimateFlags {
                y0: true,
                frame: false,
                w_tilde: true,
                beta: false,
                tau: true,
            },
            StudyKind::Frame3 => EstimateFlags {
                y0: false,
                frame: true,
                w_tilde: true,
                beta: false,
                tau: true,
            },
            StudyKind::Custom => EstimateFlags::default(),
        })
    }

    fn settings(&self) -> SimulationSettings {
        SimulationSettings {
            steps: self.fit.steps,
            total_time: self.fit.total_time,
            substeps: self.fit.substeps,
            sampling: SamplingOptions {
                brownian: self.brownian,
            },
        }
    }
}

/// Interleaved `(x, y)` coordinates of planar points.
fn interleave(points: &[(f64, f64)]) -> Point {
    DVector::from_iterator(points.len() * 2, points.iter().flat_map(|&(x, y)| [x, y]))
}

/// The 8 unit-circle landmarks at angles `k pi / 4`.
pub fn circle_landmarks() -> Point {
    let pts: Vec<_> = (0..8).map(|k| (k as f64 * PI / 4.0).cos()).zip((0..8).map(|k| (k as f64 * PI / 4.0).sin())).collect();
    interleave(&pts)
}

/// True parameters of the circle study: radial and tangential frame
/// vectors at every landmark, orthonormalized under the metric.
pub fn circle_truth(model: &Manifold, tau: f64) -> Result<ModelParameters> {
    let y0 = circle_landmarks();
    let raw = DMatrix::from_fn(16, 2, |i, j| {
        let a = (i / 2) as f64 * PI / 4.0;
        match (j, i % 2) {
            (0, 0) => a.cos(),
            (0, _) => a.sin(),
            (_, 0) => -a.sin(),
            _ => a.cos(),
        }
    });
    ModelParameters::with_raw_frame(
        model,
        y0,
        &raw,
        DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.1, 0.2]),
        DVector::zeros(2),
        tau,
    )
}

/// Three landmarks on a horizontal line, each driven vertically.
pub fn frame3_truth(model: &Manifold, tau: f64) -> Result<ModelParameters> {
    let y0 = interleave(&[(-1.0, 0.0), (0.0, 0.0), (1.0, 0.0)]);
    let raw = DMatrix::from_fn(6, 1, |i, _| (i % 2) as f64);
    ModelParameters::with_raw_frame(model, y0, &raw, DMatrix::from_element(1, 1, 0.2), DVector::zeros(1), tau)
}

/// Geometry, truth and simulated data of one study dataset.
#[derive(Clone, Debug)]
pub struct Simulated {
    pub model: Manifold,
    pub truth: ModelParameters,
    pub data: Dataset,
}

fn study_geometry(config: &StudyConfig) -> Result<(Manifold, ModelParameters)> {
    match config.study {
        StudyKind::Circle8 => {
            let model = Manifold::landmarks(8, config.kernel_sigma.unwrap_or(0.5))?;
            let truth = circle_truth(&model, config.tau.unwrap_or(0.1))?;
            Ok((model, truth))
        }
        StudyKind::Frame3 => {
            let model = Manifold::landmarks(3, config.kernel_sigma.unwrap_or(0.5))?;
            let truth = frame3_truth(&model, config.tau.unwrap_or(0.1))?;
            Ok((model, truth))
        }
        StudyKind::Custom => {
            let mc = config
                .manifold
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("custom study needs `manifold`".into()))?;
            let model = Manifold::from_config(mc)?;
            let mut truth = config
                .truth
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("custom study needs `truth`".into()))?
                .to_parameters(&model)?;
            if let Some(t) = config.tau {
                truth.tau = t;
            }
            Ok((model, truth))
        }
    }
}

/// `n x m` covariates, iid normal with the configured standard deviation.
pub fn sample_covariates(n: usize, m: usize, sd: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ COVARIATE_STREAM));
    let normal = Normal::new(0.0, sd).expect("sd validated");
    DMatrix::from_fn(n, m, |_, _| normal.sample(&mut rng))
}

/// Simulates one dataset of size `n` with master seed `seed`.
pub fn simulate_study_dataset(config: &StudyConfig, n: usize, seed: u64) -> Result<Simulated> {
    config.validate()?;
    let (model, truth) = study_geometry(config)?;
    let m = truth.num_covariates();
    let x = sample_covariates(n, m, config.covariate_sd, seed);
    let spec = CovariateSpec::all_fixed(m);
    let data = simulate_dataset(&model, &truth, &x, &spec, &config.settings(), seed)?;
    Ok(Simulated { model, truth, data })
}

/// Writes the dataset of `config` (size `n`, seed `seed`) to `dir`:
/// shapes, covariates, covariate spec, true parameters, manifold and a
/// manifest.
pub fn make_study(config: &StudyConfig, dir: &Path) -> Result<Simulated> {
    let sim = simulate_study_dataset(config, config.n, config.seed)?;
    std::fs::create_dir_all(dir)?;
    save_dataset(dir, &sim.data)?;
    write_json(&dir.join("theta_true.json"), &ThetaFile::from_parameters(&sim.truth))?;
    write_json(&dir.join("manifold.json"), &sim.model.config())?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest::new("simulate", Some(config.seed), serde_json::to_value(config)?),
    )?;
    Ok(sim)
}

/// The circle study dataset; see [`make_study`].
pub fn make_circle_study(config: &StudyConfig, dir: &Path) -> Result<Simulated> {
    if config.study != StudyKind::Circle8 {
        return Err(Error::InvalidConfig("not a circle8 configuration".into()));
    }
    make_study(config, dir)
}

/// Fits a study dataset. Blocks that are not estimated are held at the
/// truth; the others start from least squares.
pub fn fit_study(config: &StudyConfig, sim: &Simulated) -> Result<FitResult> {
    let flags = config.estimate_flags();
    let opts = InitOptions {
        y0: (!flags.y0).then(|| sim.truth.y0.clone()),
        frame: (!flags.frame).then(|| sim.truth.frame.clone()),
    };
    let mut init = initial_parameters(&sim.model, &sim.data, &opts)?;
    if !flags.w_tilde {
        init.w_tilde = sim.truth.w_tilde.clone();
    }
    if !flags.beta {
        init.beta = sim.truth.beta.clone();
    }
    if !flags.tau {
        init.tau = sim.truth.tau;
    }
    let fit_config = FitConfig {
        estimate: flags,
        ..config.fit.clone()
    };
    fit(&sim.model, &sim.data, &fit_config, Some(&init))
}

/// Type-7 sample quantile (linear interpolation between order statistics).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub log_likelihood: Option<f64>,
    pub w_tilde: Option<Vec<Vec<f64>>>,
    pub y0: Option<Vec<f64>>,
    pub frame: Option<Vec<Vec<f64>>>,
    pub tau: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntrySummary {
    pub row: usize,
    pub col: usize,
    pub truth: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub n: usize,
    pub seed: u64,
    pub record: ReplicateRecord,
    pub abs_error: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub config: StudyConfig,
    pub truth: ThetaFile,
    pub replicates: Vec<ReplicateRecord>,
    pub failures: usize,
    pub summary: Vec<EntrySummary>,
    pub convergence_table: Vec<SizeRow>,
    /// Entries whose error at the largest size is at most the error at
    /// the smallest size.
    pub entries_improved: Option<usize>,
}

fn run_replicate(config: &StudyConfig, index: usize, n: usize, seed: u64) -> (ReplicateRecord, Option<(Simulated, FitResult)>) {
    let outcome = simulate_study_dataset(config, n, seed).and_then(|sim| fit_study(config, &sim).map(|f| (sim, f)));
    match outcome {
        Ok((sim, f)) => (
            ReplicateRecord {
                index,
                seed,
                converged: f.diagnostics.converged,
                outer_iterations: f.diagnostics.outer_iterations,
                log_likelihood: Some(f.log_likelihood),
                w_tilde: Some(rows_of(&f.theta_hat.w_tilde)),
                y0: Some(f.theta_hat.y0.iter().copied().collect()),
                frame: Some(rows_of(&f.theta_hat.frame)),
                tau: Some(f.theta_hat.tau),
                error: None,
            },
            Some((sim, f)),
        ),
        Err(e) => (
            ReplicateRecord {
                index,
                seed,
                converged: false,
                outer_iterations: 0,
                log_likelihood: None,
                w_tilde: None,
                y0: None,
                frame: None,
                tau: None,
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

fn check_failures(records: &[ReplicateRecord]) -> Result<usize> {
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed * 5 > records.len() {
        return Err(Error::ReplicateFailures {
            failed,
            total: records.len(),
        });
    }
    Ok(failed)
}

/// Replicated simulate-and-fit at size `config.n` (default 50 replicates)
/// plus single fits at each of `config.sizes`. Replicate `r` uses seed
/// `derive_seed(seed, r)`.
pub fn run_recovery_study(config: &StudyConfig) -> Result<RecoveryReport> {
    config.validate()?;
    let (_, truth) = study_geometry(config)?;
    let reps = config.replicates.unwrap_or(50);
    let replicates: Vec<ReplicateRecord> = (0..reps)
        .into_par_iter()
        .map(|r| run_replicate(config, r, config.n, derive_seed(config.seed, r as u64)).0)
        .collect();
    let failures = check_failures(&replicates)?;

    let m = truth.num_covariates();
    let mut summary = Vec::new();
    for a in 0..m {
        for b in 0..m {
            let vals: Vec<f64> = replicates.iter().filter_map(|r| r.w_tilde.as_ref().map(|w| w[a][b])).collect();
            let (q05, q50, q95) = (quantile(&vals, 0.05), quantile(&vals, 0.5), quantile(&vals, 0.95));
            let t = truth.w_tilde[(a, b)];
            summary.push(EntrySummary {
                row: a,
                col: b,
                truth: t,
                q05,
                q50,
                q95,
                covered: q05 <= t && t <= q95,
            });
        }
    }

    let convergence_table: Vec<SizeRow> = config
        .sizes
        .par_iter()
        .map(|&n| {
            let seed = derive_seed(config.seed ^ 0x5a5a_5a5a, n as u64);
            let (record, _) = run_replicate(config, n, n, seed);
            let abs_error = record.w_tilde.as_ref().map(|w| {
                (0..m)
                    .map(|a| (0..m).map(|b| (w[a][b] - truth.w_tilde[(a, b)]).abs()).collect())
                    .collect()
            });
            SizeRow {
                n,
                seed,
                record,
                abs_error,
            }
        })
        .collect();
    let entries_improved = match (convergence_table.first(), convergence_table.last()) {
        (Some(first), Some(last)) if convergence_table.len() > 1 => match (&first.abs_error, &last.abs_error) {
            (Some(e0), Some(e1)) => Some(
                (0..m)
                    .flat_map(|a| (0..m).map(move |b| (a, b)))
                    .filter(|&(a, b)| e1[a][b] <= e0[a][b])
                    .count(),
            ),
            _ => None,
        },
        _ => None,
    };

    Ok(RecoveryReport {
        config: config.clone(),
        truth: ThetaFile::from_parameters(&truth),
        replicates,
        failures,
        summary,
        convergence_table,
        entries_improved,
    })
}

/// Angles in degrees between each landmark's frame vector and the vertical,
/// ignoring sign. Column `col` of a `2L x m` frame.
pub fn vertical_angles(frame: &DMatrix<f64>, col: usize) -> Vec<f64> {
    (0..frame.nrows() / 2)
        .map(|l| {
            let (vx, vy) = (frame[(2 * l, col)], frame[(2 * l + 1, col)]);
            let norm = vx.hypot(vy);
            if norm == 0.0 {
                90.0
            } else {
                (vy.abs() / norm).clamp(0.0, 1.0).acos().to_degrees()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReplicate {
    pub record: ReplicateRecord,
    pub init_angles_deg: Option<Vec<f64>>,
    pub angles_deg: Option<Vec<f64>>,
    pub max_angle_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub config: StudyConfig,
    pub truth: ThetaFile,
    pub replicates: Vec<FrameReplicate>,
    pub failures: usize,
    pub max_angle_deg: Option<f64>,
}

/// Frame-estimation study; reports angular errors against the vertical
/// truth (default 1 replicate).
pub fn run_frame_study(config: &StudyConfig) -> Result<FrameReport> {
    config.validate()?;
    let (_, truth) = study_geometry(config)?;
    let reps = config.replicates.unwrap_or(1);
    let replicates: Vec<FrameReplicate> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(config.seed, r as u64);
            let (record, out) = run_replicate(config, r, config.n, seed);
            let init_angles_deg = out.as_ref().and_then(|(sim, _)| {
                initial_parameters(
                    &sim.model,
                    &sim.data,
                    &InitOptions {
                        y0: Some(sim.truth.y0.clone()),
                        frame: None,
                    },
                )
                .ok()
                .map(|t| vertical_angles(&t.frame, 0))
            });
            let angles_deg = out.as_ref().map(|(_, f)| vertical_angles(&f.theta_hat.frame, 0));
            let max_angle_deg = angles_deg.as_ref().map(|a| a.iter().copied().fold(0.0, f64::max));
            FrameReplicate {
                record,
                init_angles_deg,
                angles_deg,
                max_angle_deg,
            }
        })
        .collect();
    let records: Vec<_> = replicates.iter().map(|r| r.record.clone()).collect();
    let failures = check_failures(&records)?;
    let max_angle_deg = replicates
        .iter()
        .filter_map(|r| r.max_angle_deg)
        .fold(None, |acc: Option<f64>, a| Some(acc.map_or(a, |b| b.max(a))));
    Ok(FrameReport {
        config: config.clone(),
        truth: ThetaFile::from_parameters(&truth),
        replicates,
        failures,
        max_angle_deg,
    })
}

/// Christoffel symbols assembled from a central-difference derivative of
/// the metric.
pub fn fd_christoffel(model: &Manifold, p: &Point, h: f64) -> Result<Tensor3> {
    let d = model.dim();
    let mut dg = Tensor3::zeros(d);
    for l in 0..d {
        let mut pp = p.clone();
        pp[l] += h;
        let gp = model.metric(&pp)?;
        pp[l] -= 2.0 * h;
        let gm = model.metric(&pp)?;
        for a in 0..d {
            for b in 0..d {
                dg[(l, a, b)] = (gp[(a, b)] - gm[(a, b)]) / (2.0 * h);
            }
        }
    }
    Ok(christoffel_from_parts(&model.cometric(p)?, &dg))
}

/// OLS fit of the reduced flat model with the frame held at `frame`:
/// returns `(y0, W~)`. The frame-direction part of `y0` is the fitted
/// intercept; the orthogonal part is the response mean.
pub fn flat_ols(data: &Dataset, frame: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.len();
    let m = frame.ncols();
    let design = DMatrix::from_fn(n, m + 1, |i, j| if j == 0 { 1.0 } else { data.x[(i, j - 1)] });
    let reduced = &data.y * frame;
    let coef = (design.transpose() * &design)
        .lu()
        .solve(&(design.transpose() * reduced))
        .expect("design has full rank");
    let y_mean = data.y.row_mean().transpose();
    let intercept = coef.row(0).transpose();
    let y0 = &y_mean - frame * (frame.transpose() * &y_mean) + frame * intercept;
    let w = coef.rows(1, m).transpose();
    (y0, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub all_passed: bool,
}

fn entry(name: &str, value: Result<f64>, pass: impl Fn(f64) -> bool, threshold: &str) -> CheckEntry {
    let (value, passed) = match value {
        Ok(v) => (v, pass(v)),
        Err(_) => (f64::NAN, false),
    };
    CheckEntry {
        name: name.into(),
        passed,
        value,
        threshold: threshold.into(),
    }
}

fn sphere_christoffel_deviation() -> Result<f64> {
    let model = Manifold::sphere2();
    let mut worst = 0.0_f64;
    for theta in [0.3, 0.9, PI / 2.0, 2.4] {
        let g = model.christoffel(&DVector::from_vec(vec![theta, 0.7]))?;
        let mut exact = Tensor3::zeros(2);
        exact[(0, 1, 1)] = -theta.sin() * theta.cos();
        exact[(1, 0, 1)] = theta.cos() / theta.sin();
        exact[(1, 1, 0)] = theta.cos() / theta.sin();
        worst = worst.max(g.max_abs_diff(&exact));
    }
    Ok(worst)
}

fn landmark_christoffel_deviation(configs: usize, seed: u64) -> Result<f64> {
    let model = Manifold::landmarks(3, 0.7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..configs {
        let p = DVector::from_fn(6, |i, _| (i / 2) as f64 * 0.8 + rng.gen_range(-0.3..0.3));
        let fd = fd_christoffel(&model, &p, 1e-5)?;
        worst = worst.max(model.christoffel(&p)?.max_abs_diff(&fd));
    }
    Ok(worst)
}

fn sphere_geodesic_error() -> Result<f64> {
    let model = Manifold::sphere2();
    let u0 = FramePoint::new(DVector::from_vec(vec![PI / 2.0, 0.0]), DMatrix::identity(2, 2))?;
    let path = DrivingPath::straight(&DVector::from_vec(vec![0.6, 0.8]), 50, 1.0)?;
    let end = develop_endpoint(&model, &u0, &path, 4)?;
    let p = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let v = DVector::from_vec(vec![0.0, 0.8, -0.6]);
    Ok((end - (p * 1.0_f64.cos() + v * 1.0_f64.sin())).norm())
}

fn isometry_drift() -> Result<f64> {
    let model = Manifold::landmarks(3, 0.7)?;
    let base = interleave(&[(-0.8, 0.0), (0.0, 0.2), (0.8, -0.1)]);
    let raw = DMatrix::from_fn(6, 2, |i, j| if i % 2 == j { 1.0 } else { 0.2 * (i as f64 - 2.5) });
    let (frame, _) = orthonormalize_with_factor(&model, &base, &raw)?;
    let u0 = FramePoint::new(base, frame)?;
    let inc = DMatrix::from_fn(100, 2, |t, j| 0.01 * ((t as f64 * 0.1 + j as f64).sin() + 0.5));
    let dev = develop(&model, &u0, &DrivingPath::new(inc, 1.0)?, 4)?;
    let g0 = frame_gram(&model, &u0)?;
    let mut drift = 0.0_f64;
    for s in &dev.states {
        drift = drift.max((frame_gram(&model, s)? - &g0).amax());
    }
    Ok(drift)
}

fn sphere_integrator_order() -> Result<f64> {
    let model = Manifold::sphere2();
    let u0 = FramePoint::new(DVector::from_vec(vec![1.2, 0.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 / 1.2_f64.sin()]))?;
    let inc = DMatrix::from_fn(8, 2, |t, j| if j == 0 { 0.1 * (t as f64).cos() } else { 0.12 });
    Ok(convergence_order(&model, &u0, &DrivingPath::new(inc, 1.0)?)?.order)
}

fn flat_ols_deviation() -> Result<f64> {
    let config = StudyConfig {
        study: StudyKind::Custom,
        n: 30,
        seed: 3,
        manifold: Some(Manifold::flat(3)?.config()),
        truth: Some(ThetaFile {
            y0: vec![0.5, -0.2, 1.0],
            frame: vec![vec![0.6, 0.0], vec![0.8, 0.0], vec![0.0, 1.0]],
            w_tilde: vec![vec![0.4, 0.1], vec![-0.3, 0.2]],
            beta: vec![0.0, 0.0],
            tau: 0.2,
        }),
        estimate: Some(EstimateFlags {
            y0: true,
            frame: false,
            w_tilde: true,
            beta: false,
            tau: true,
        }),
        fit: FitConfig {
            steps: 5,
            substeps: 1,
            hessian: HessianMode::GaussNewton,
            ..FitConfig::default()
        },
        ..StudyConfig::default()
    };
    let sim = simulate_study_dataset(&config, config.n, config.seed)?;
    let result = fit_study(&config, &sim)?;
    let (y0, w) = flat_ols(&sim.data, &sim.truth.frame);
    Ok((result.theta_hat.y0 - y0).amax().max((result.theta_hat.w_tilde - w).amax()))
}

/// Runs the geometry, development and flat-inference invariants.
pub fn check() -> CheckReport {
    let entries = vec![
        entry(
            "sphere_christoffel_closed_form",
            sphere_christoffel_deviation(),
            |v| v < 1e-10,
            "< 1e-10",
        ),
        entry(
            "landmark_christoffel_finite_difference",
            landmark_christoffel_deviation(20, 7),
            |v| v < 1e-4,
            "< 1e-4",
        ),
        entry("sphere_geodesic_endpoint", sphere_geodesic_error(), |v| v < 1e-4, "< 1e-4"),
        entry("isometry_drift", isometry_drift(), |v| v < 1e-4, "< 1e-4"),
        entry(
            "sphere_integrator_order",
            sphere_integrator_order(),
            |v| (1.7..=2.3).contains(&v),
            "in [1.7, 2.3]",
        ),
        entry("flat_ols_equivalence", flat_ols_deviation(), |v| v < 1e-4, "< 1e-4"),
    ];
    let all_passed = entries.iter().all(|e| e.passed);
    CheckReport { entries, all_passed }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub n: usize,
    pub ambient_dim: usize,
    pub num_landmarks: usize,
    pub covariate_ranges: Vec<[f64; 2]>,
}

/// Loads a planar landmark dataset (interleaved `x, y` per landmark).
pub fn ingest_landmark_dataset(shapes: &Path, covariates: &Path, spec: &Path) -> Result<(Dataset, IngestSummary)> {
    let data = crate::io::load_dataset(shapes, covariates, spec)?;
    let k = data.ambient_dim();
    if k % 2 != 0 {
        return Err(Error::InvalidData(format!("{k} shape coordinates do not form planar landmarks")));
    }
    let covariate_ranges = data
        .x
        .column_iter()
        .map(|c| [c.min(), c.max()])
        .collect();
    let summary = IngestSummary {
        n: data.len(),
        ambient_dim: k,
        num_landmarks: k / 2,
        covariate_ranges,
    };
    Ok((data, summary))
}

/// A corpus-callosum-like synthetic dataset: 20 landmarks 0.3 apart on an
/// arch of radius 2, kernel width 0.1, one age covariate uniform on
/// `[22, 78]`, no drift.
pub fn cc_fixture(n: usize, seed: u64) -> Result<Simulated> {
    let model = Manifold::landmarks(20, 0.1)?;
    let radius = 2.0;
    let span = 19.0 * 0.3 / radius;
    let pts: Vec<_> = (0..20)
        .map(|l| {
            let a = PI / 2.0 + span * (l as f64 / 19.0 - 0.5);
            (radius * a.cos(), radius * a.sin())
        })
        .collect();
    let y0 = interleave(&pts);
    let raw = DMatrix::from_fn(40, 1, |i, _| (i % 2) as f64);
    let truth = ModelParameters::with_raw_frame(
        &model,
        y0,
        &raw,
        DMatrix::from_element(1, 1, 0.002),
        DVector::zeros(1),
        0.1,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ COVARIATE_STREAM));
    let x = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(22.0..=78.0));
    let settings = SimulationSettings {
        steps: 10,
        total_time: 1.0,
        substeps: 2,
        sampling: SamplingOptions::default(),
    };
    let data = simulate_dataset(&model, &truth, &x, &CovariateSpec::all_fixed(1), &settings, seed)?;
    Ok(Simulated { model, truth, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn circle_landmark_positions() {
        let y0 = circle_landmarks();
        assert_abs_diff_eq!(y0[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y0[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y0[4], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y0[5], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn circle_frame_is_radial_and_tangential() {
        let model = Manifold::landmarks(8, 0.5).unwrap();
        let truth = circle_truth(&model, 0.1).unwrap();
        assert_abs_diff_eq!(frame_gram(&model, &truth.frame_point()).unwrap(), DMatrix::identity(2, 2), epsilon = 1e-10);
        // by symmetry, orthonormalization only rescales each column
        for l in 0..8 {
            let a = l as f64 * PI / 4.0;
            let r = (truth.frame[(2 * l, 0)], truth.frame[(2 * l + 1, 0)]);
            assert_abs_diff_eq!(r.0 * a.sin() - r.1 * a.cos(), 0.0, epsilon = 1e-12);
            let t = (truth.frame[(2 * l, 1)], truth.frame[(2 * l + 1, 1)]);
            assert_abs_diff_eq!(t.0 * a.cos() + t.1 * a.sin(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn covariate_variance_matches_sd() {
        let x = sample_covariates(1000, 2, 2.0, 42);
        for c in x.column_iter() {
            let mean = c.mean();
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0;
            assert!((var - 4.0).abs() < 0.4, "variance {var}");
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_abs_diff_eq!(quantile(&v, 0.05), 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(quantile(&v, 0.95), 4.8, epsilon = 1e-12);
    }

    #[test]
    fn vertical_angles_ignore_sign() {
        let f = DMatrix::from_row_slice(4, 1, &[0.0, -2.0, 1.0, 1.0]);
        let a = vertical_angles(&f, 0);
        assert_abs_diff_eq!(a[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 45.0, epsilon = 1e-12);
    }

    #[test]
    fn cc_fixture_shape() {
        let sim = cc_fixture(20, 1).unwrap();
        assert_eq!(sim.data.len(), 20);
        assert_eq!(sim.data.num_covariates(), 1);
        assert_eq!(sim.data.ambient_dim(), 40);
        assert!(sim.data.x.iter().all(|&a| (22.0..=78.0).contains(&a)));
        let gaps: Vec<f64> = (0..19)
            .map(|l| {
                let (a, b) = (2 * l, 2 * l + 2);
                (sim.truth.y0[a] - sim.truth.y0[b]).hypot(sim.truth.y0[a + 1] - sim.truth.y0[b + 1])
            })
            .collect();
        assert!(gaps.iter().all(|g| (g - 0.3).abs() < 0.01));
    }

    #[test]
    fn frame_study_initialization_is_ols_slope() {
        let config = StudyConfig {
            study: StudyKind::Frame3,
            n: 20,
            seed: 5,
            ..StudyConfig::default()
        };
        let sim = simulate_study_dataset(&config, 20, 5).unwrap();
        let init = initial_parameters(
            &sim.model,
            &sim.data,
            &InitOptions {
                y0: Some(sim.truth.y0.clone()),
                frame: None,
            },
        )
        .unwrap();
        // slope of each ambient coordinate on the single covariate
        let x = sim.data.x.column(0);
        let xm = x.mean();
        let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
        let slope = DVector::from_fn(6, |c, _| {
            let y = sim.data.y.column(c);
            let ym = y.mean();
            x.iter().zip(y.iter()).map(|(a, b)| (a - xm) * (b - ym)).sum::<f64>() / sxx
        });
        let u = init.frame.column(0);
        let cos = u.dot(&slope) / (u.norm() * slope.norm());
        assert_abs_diff_eq!(cos, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(init.w_tilde[(0, 0)] * u, slope, epsilon = 1e-10);
    }
}
