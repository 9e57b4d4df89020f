//! Laplace-approximate maximum likelihood.
//!
//! For fixed parameters the latent driver increments of each observation
//! are set to the mode of the joint density (the inner problem). The
//! marginal likelihood is then approximated by a Gaussian integral around
//! that mode, and the result is maximized over the parameters.

mod fit;
mod observation;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::development::{DEFAULT_STEPS, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};
use crate::frame::FramePoint;
use crate::geometry::Manifold;
use crate::process::{Dataset, LatentPrior, ModelParameters};

pub use fit::{fit, initial_parameters, InitOptions};
use observation::{flatten, unflatten, BlockHessian, InnerSolution, ObservationProblem};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    LevenbergMarquardt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_rule: StepRule,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grad_tol: 1e-6,
            step_rule: StepRule::LevenbergMarquardt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterAlgorithm {
    SurrogateTrustRegion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterConfig {
    pub max_iters: usize,
    /// Relative change of the log-likelihood that counts as converged.
    pub tol: f64,
    pub algorithm: OuterAlgorithm,
    /// Initial trust radius, infinity norm in parameter coordinates.
    pub initial_radius: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            algorithm: OuterAlgorithm::SurrogateTrustRegion,
            initial_radius: 0.5,
        }
    }
}

/// How the latent Hessian at the mode is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Central differences of the finite-difference gradient.
    FiniteDifference,
    /// `J^T J / tau^2 + P` from the endpoint Jacobian.
    GaussNewton,
}

/// Which parameter blocks the outer loop moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateFlags {
    pub y0: bool,
    pub frame: bool,
    pub w_tilde: bool,
    pub beta: bool,
    pub tau: bool,
}

impl Default for EstimateFlags {
    fn default() -> Self {
        Self {
            y0: true,
            frame: true,
            w_tilde: true,
            beta: true,
            tau: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of time steps `n_s` of each latent driver.
    pub steps: usize,
    pub substeps: usize,
    pub total_time: f64,
    pub inner: InnerConfig,
    pub outer: OuterConfig,
    pub fd_step: f64,
    pub hessian_step: f64,
    pub hessian: HessianMode,
    pub estimate: EstimateFlags,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            substeps: DEFAULT_SUBSTEPS,
            total_time: 1.0,
            inner: InnerConfig::default(),
            outer: OuterConfig::default(),
            fd_step: 1e-5,
            hessian_step: 1e-4,
            hessian: HessianMode::FiniteDifference,
            estimate: EstimateFlags::default(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_time", self.total_time),
            ("inner.grad_tol", self.inner.grad_tol),
            ("outer.tol", self.outer.tol),
            ("outer.initial_radius", self.outer.initial_radius),
            ("fd_step", self.fd_step),
            ("hessian_step", self.hessian_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.steps == 0 || self.substeps == 0 {
            return Err(Error::InvalidConfig("steps and substeps must be positive".into()));
        }
        Ok(())
    }
}

/// Latent increments of all observations, observation-major, each block
/// flattened row-major (`t * m + j`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStack {
    pub steps: usize,
    pub width: usize,
    pub values: DVector<f64>,
}

impl LatentStack {
    pub fn from_blocks(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let (steps, width) = blocks.first().map(|b| b.shape()).unwrap_or((0, 0));
        if blocks.iter().any(|b| b.shape() != (steps, width)) {
            return Err(Error::DimensionMismatch("latent blocks differ in shape".into()));
        }
        let mut values = Vec::with_capacity(blocks.len() * steps * width);
        for b in blocks {
            values.extend(flatten(b).iter());
        }
        let stack = Self {
            steps,
            width,
            values: DVector::from_vec(values),
        };
        if stack.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite latent value".into()));
        }
        Ok(stack)
    }

    pub fn block_len(&self) -> usize {
        self.steps * self.width
    }

    pub fn num_observations(&self) -> usize {
        if self.block_len() == 0 {
            0
        } else {
            self.values.len() / self.block_len()
        }
    }

    /// Increments of observation `i` as a `steps x width` matrix.
    pub fn block(&self, i: usize) -> DMatrix<f64> {
        let len = self.block_len();
        let v = self.values.rows(i * len, len).into_owned();
        unflatten(&v, self.steps, self.width)
    }

    pub fn blocks(&self) -> Vec<DMatrix<f64>> {
        (0..self.num_observations()).map(|i| self.block(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InnerDiagnostics {
    pub grad_norms: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerModes {
    pub latent: LatentStack,
    pub diagnostics: InnerDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaplaceHessian {
    /// `log |Sigma|` with `Sigma` the inverse Hessian of `h`.
    pub log_det_sigma: f64,
    pub floored: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OuterStep {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub radius: f64,
    pub predicted: f64,
    pub actual: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub inner_grad_norms: Vec<f64>,
    pub inner_iterations: Vec<usize>,
    pub inner_converged: Vec<bool>,
    pub outer_trace: Vec<OuterStep>,
    pub hessian_log_det: f64,
    pub floored_eigenvalues: usize,
    pub outer_iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub theta_hat: ModelParameters,
    pub log_likelihood: f64,
    pub inner_modes: LatentStack,
    pub diagnostics: FitDiagnostics,
}

fn check_inputs(model: &Manifold, theta: &ModelParameters, dataset: &Dataset, config: &FitConfig) -> Result<()> {
    config.validate()?;
    theta.validate(model)?;
    if !(theta.tau > 0.0) {
        return Err(Error::InvalidConfig("inference needs tau > 0".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    if dataset.ambient_dim() != model.ambient_dim() || dataset.num_covariates() != theta.num_covariates() {
        return Err(Error::DimensionMismatch(format!(
            "dataset is {}-dimensional with {} covariates, model expects {} and {}",
            dataset.ambient_dim(),
            dataset.num_covariates(),
            model.ambient_dim(),
            theta.num_covariates()
        )));
    }
    Ok(())
}

fn check_stack(latent: &LatentStack, dataset: &Dataset, theta: &ModelParameters, config: &FitConfig) -> Result<()> {
    if latent.steps != config.steps
        || latent.width != theta.num_covariates()
        || latent.values.len() != dataset.len() * config.steps * theta.num_covariates()
    {
        return Err(Error::DimensionMismatch(format!(
            "latent stack of length {} for n = {}, m = {}, n_s = {}",
            latent.values.len(),
            dataset.len(),
            theta.num_covariates(),
            config.steps
        )));
    }
    Ok(())
}

fn problem<'a>(
    model: &'a Manifold,
    start: &'a FramePoint,
    theta: &ModelParameters,
    dataset: &Dataset,
    config: &FitConfig,
    i: usize,
) -> Result<ObservationProblem<'a>> {
    let prior = LatentPrior::new(theta, &dataset.covariates(i), &dataset.spec, config.steps, config.total_time)?;
    Ok(ObservationProblem {
        model,
        start,
        y: dataset.response(i),
        prior,
        tau: theta.tau,
        substeps: config.substeps,
        fd_step: config.fd_step,
    })
}

/// `h = -(1/n) log f(y | z) - (1/n) log p(z)` for the stacked latent `z`.
pub fn h_objective(
    model: &Manifold,
    latent: &LatentStack,
    theta: &ModelParameters,
    dataset: &Dataset,
    config: &FitConfig,
) -> Result<f64> {
    check_inputs(model, theta, dataset, config)?;
    check_stack(latent, dataset, theta, config)?;
    let start = theta.frame_point();
    let values = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let p = problem(model, &start, theta, dataset, config, i)?;
            p.value(&latent.block(i)).map_err(|e| e.at_observation(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum::<f64>() / dataset.len() as f64)
}

/// Per-observation results of one likelihood evaluation.
#[derive(Clone, Debug)]
pub(crate) struct Evaluation {
    pub log_likelihood: f64,
    pub solutions: Vec<InnerSolution>,
    pub hessians: Vec<BlockHessian>,
}

impl Evaluation {
    pub fn latent(&self) -> LatentStack {
        let blocks: Vec<_> = self.solutions.iter().map(|s| s.z.clone()).collect();
        LatentStack::from_blocks(&blocks).expect("modes share one shape")
    }

    pub fn inner_diagnostics(&self) -> InnerDiagnostics {
        InnerDiagnostics {
            grad_norms: self.solutions.iter().map(|s| s.grad_norm).collect(),
            iterations: self.solutions.iter().map(|s| s.iterations).collect(),
            converged: self.solutions.iter().map(|s| s.converged).collect(),
        }
    }

    pub fn hessian_summary(&self, n: usize) -> Result<LaplaceHessian> {
        summarize_hessians(&self.hessians, n)
    }
}

fn summarize_hessians(blocks: &[BlockHessian], n: usize) -> Result<LaplaceHessian> {
    let total: usize = blocks.iter().map(|b| b.size).sum();
    let floored: usize = blocks.iter().map(|b| b.floored).sum();
    if floored * 10 > total {
        return Err(Error::IllConditionedLaplace { floored, total });
    }
    // D^2 h = blockdiag(H_i) / n
    let sum_log_det: f64 = blocks.iter().map(|b| b.log_det).sum();
    Ok(LaplaceHessian {
        log_det_sigma: total as f64 * (n as f64).ln() - sum_log_det,
        floored,
        total,
    })
}

/// Assembles the Laplace approximation from `h` at the mode and `log |Sigma|`.
fn laplace_from_parts(h: f64, hessian: &LaplaceHessian, n: usize) -> f64 {
    let nf = n as f64;
    let dim = hessian.total as f64;
    -nf * h + 0.5 * dim * LN_2PI + 0.5 * hessian.log_det_sigma - 0.5 * dim * nf.ln()
}

/// Inner modes and Hessian blocks for all observations.
pub(crate) fn evaluate(
    model: &Manifold,
    theta: &ModelParameters,
    dataset: &Dataset,
    config: &FitConfig,
    warm: Option<&[DMatrix<f64>]>,
) -> Result<Evaluation> {
    check_inputs(model, theta, dataset, config)?;
    let start = theta.frame_point();
    let per_obs = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let run = || {
                let p = problem(model, &start, theta, dataset, config, i)?;
                let z0 = match warm {
                    Some(w) => w[i].clone(),
                    None => p.prior.mean.clone(),
                };
                let sol = p.solve(&z0, &config.inner)?;
                let hess = p.hessian(&sol, config.hessian, config.hessian_step)?;
                Ok((sol, hess))
            };
            run().map_err(|e: Error| e.at_observation(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let (solutions, hessians): (Vec<_>, Vec<_>) = per_obs.into_iter().unzip();
    let n = dataset.len();
    let h = solutions.iter().map(|s| s.lin.value).sum::<f64>() / n as f64;
    let summary = summarize_hessians(&hessians, n)?;
    Ok(Evaluation {
        log_likelihood: laplace_from_parts(h, &summary, n),
        solutions,
        hessians,
    })
}

/// Mode of the joint density over the latent increments, solved per
/// observation.
pub fn inner_mode(
    model: &Manifold,
    theta: &ModelParameters,
    dataset: &Dataset,
    config: &FitConfig,
    warm_start: Option<&LatentStack>,
) -> Result<InnerModes> {
    check_inputs(model, theta, dataset, config)?;
    if let Some(w) = warm_start {
        check_stack(w, dataset, theta, config)?;
    }
    let start = theta.frame_point();
    let solutions = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let run = || {
                let p = problem(model, &start, theta, dataset, config, i)?;
                let z0 = warm_start.map(|w| w.block(i)).unwrap_or_else(|| p.prior.mean.clone());
                p.solve(&z0, &config.inner)
            };
            run().map_err(|e| e.at_observation(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = Evaluation {
        log_likelihood: f64::NAN,
        solutions,
        hessians: Vec::new(),
    };
    Ok(InnerModes {
        latent: eval.latent(),
        diagnostics: eval.inner_diagnostics(),
    })
}

/// Hessian of `h` at `latent_mode`, block-diagonal over observations.
pub fn laplace_hessian(
    model: &Manifold,
    theta: &ModelParameters,
    latent_mode: &LatentStack,
    dataset: &Dataset,
    config: &FitConfig,
) -> Result<LaplaceHessian> {
    check_inputs(model, theta, dataset, config)?;
    check_stack(latent_mode, dataset, theta, config)?;
    let start = theta.frame_point();
    let blocks = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let run = || {
                let p = problem(model, &start, theta, dataset, config, i)?;
                let z = latent_mode.block(i);
                let hess = match config.hessian {
                    HessianMode::FiniteDifference => p.fd_hessian(&z, config.hessian_step)?,
                    HessianMode::GaussNewton => p.gauss_newton_hessian(&p.linearize(&z)?),
                };
                Ok(observation::floored_log_det(&hess))
            };
            run().map_err(|e: Error| e.at_observation(i))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_hessians(&blocks, dataset.len())
}

/// Laplace approximation of the marginal log-likelihood over the full
/// latent dimension `n * m * n_s`.
pub fn laplace_log_likelihood(
    model: &Manifold,
    theta: &ModelParameters,
    dataset: &Dataset,
    config: &FitConfig,
) -> Result<f64> {
    Ok(evaluate(model, theta, dataset, config, None)?.log_likelihood)
}
