use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::development::develop_from;
use crate::error::{Error, Result};
use crate::frame::{orthonormalize_with_factor, FramePoint};
use crate::geometry::{Manifold, Point};
use crate::optim::{minimize_bfgs, BfgsOptions};
use crate::process::{Dataset, ModelParameters};

use super::observation::{flatten, unflatten};
use super::{check_inputs, evaluate, EstimateFlags, Evaluation, FitConfig, FitDiagnostics, FitResult, OuterStep};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Overrides for the least-squares starting point.
#[derive(Clone, Debug, Default)]
pub struct InitOptions {
    pub y0: Option<Point>,
    /// Frame directions, orthonormalized at `y0`; `W~` is then the
    /// projection of the slopes onto them.
    pub frame: Option<DMatrix<f64>>,
}

/// Euclidean least-squares starting point: `y0` is the chart image of the
/// mean response, the frame and `W~` come from the OLS slopes (a QR split
/// under the metric), `beta = 0` and `tau` is the residual scale.
pub fn initial_parameters(model: &Manifold, dataset: &Dataset, opts: &InitOptions) -> Result<ModelParameters> {
    let n = dataset.len();
    let m = dataset.num_covariates();
    let k = dataset.ambient_dim();
    if n <= m {
        return Err(Error::RankDeficient(format!("{n} observations for {m} covariates")));
    }
    let x_mean = dataset.x.row_mean();
    let y_mean = dataset.y.row_mean();
    let mut xc = dataset.x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let mut yc = dataset.y.clone();
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }
    let sv = xc.singular_values();
    if !(sv.min() > 1e-10 * sv.max()) {
        return Err(Error::RankDeficient("centred covariate matrix does not have full column rank".into()));
    }
    let gram = xc.tr_mul(&xc);
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("covariate Gram matrix is singular".into()))?
        .solve(&xc.tr_mul(&yc));
    let resid = &yc - &xc * &coef;
    let tau = (resid.norm_squared() / (n * k) as f64).sqrt();
    if !(tau > 0.0) {
        return Err(Error::BadInitialization("least-squares residuals vanish; tau cannot be initialized".into()));
    }

    let y0 = match &opts.y0 {
        Some(p) => p.clone(),
        None => model.chart_from_ambient(&y_mean.transpose())?,
    };
    let slopes = coef.transpose();
    let diff = model.embed_differential(&y0)?;
    let chart_slopes = diff
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::BadInitialization(e.to_string()))?
        * slopes;
    let (frame, w_tilde) = match &opts.frame {
        None => orthonormalize_with_factor(model, &y0, &chart_slopes)
            .map_err(|e| Error::BadInitialization(format!("slope directions: {e}")))?,
        Some(f) => {
            let (u, _) = orthonormalize_with_factor(model, &y0, f)?;
            let w = u.transpose() * model.metric(&y0)? * &chart_slopes;
            (u, w)
        }
    };
    ModelParameters::new(model, y0, frame, w_tilde, DVector::zeros(m), tau)
}

/// Maps the free parameter blocks to a flat vector:
/// `[y0 | raw frame | W~ | beta | log tau]`, each present only if estimated.
struct Layout {
    d: usize,
    m: usize,
    flags: EstimateFlags,
    /// Frame used (re-orthonormalized at `y0`) when the frame is held fixed.
    fixed_frame: DMatrix<f64>,
}

impl Layout {
    fn geo_len(&self) -> usize {
        self.flags.y0 as usize * self.d + self.flags.frame as usize * self.d * self.m
    }

    fn len(&self) -> usize {
        self.geo_len() + self.flags.w_tilde as usize * self.m * self.m + self.flags.beta as usize * self.m + self.flags.tau as usize
    }

    fn pack(&self, theta: &ModelParameters) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.len());
        if self.flags.y0 {
            v.extend(theta.y0.iter());
        }
        if self.flags.frame {
            v.extend(flatten(&theta.frame).iter());
        }
        if self.flags.w_tilde {
            v.extend(flatten(&theta.w_tilde).iter());
        }
        if self.flags.beta {
            v.extend(theta.beta.iter());
        }
        if self.flags.tau {
            v.push(theta.tau.ln());
        }
        DVector::from_vec(v)
    }

    /// `(W~, beta, tau)` from `phi`, falling back to `base` for fixed blocks.
    fn scalars(&self, phi: &DVector<f64>, base: &ModelParameters) -> (DMatrix<f64>, DVector<f64>, f64) {
        let m = self.m;
        let mut at = self.geo_len();
        let w = if self.flags.w_tilde {
            at += m * m;
            DMatrix::from_fn(m, m, |a, b| phi[at - m * m + a * m + b])
        } else {
            base.w_tilde.clone()
        };
        let beta = if self.flags.beta {
            at += m;
            phi.rows(at - m, m).into_owned()
        } else {
            base.beta.clone()
        };
        let tau = if self.flags.tau { phi[at].exp() } else { base.tau };
        (w, beta, tau)
    }

    fn start(&self, model: &Manifold, phi: &DVector<f64>, base: &ModelParameters) -> Result<FramePoint> {
        let (d, m) = (self.d, self.m);
        let y0 = if self.flags.y0 { phi.rows(0, d).into_owned() } else { base.y0.clone() };
        if !self.flags.y0 && !self.flags.frame {
            return Ok(base.frame_point());
        }
        let raw = if self.flags.frame {
            let off = self.flags.y0 as usize * d;
            DMatrix::from_fn(d, m, |i, j| phi[off + i * m + j])
        } else {
            self.fixed_frame.clone()
        };
        model.validate(&y0)?;
        let (frame, _) = orthonormalize_with_factor(model, &y0, &raw)?;
        Ok(FramePoint { base: y0, frame })
    }

    fn unpack(&self, model: &Manifold, phi: &DVector<f64>, base: &ModelParameters) -> Result<ModelParameters> {
        let start = self.start(model, phi, base)?;
        let (w, beta, tau) = self.scalars(phi, base);
        ModelParameters::new(model, start.base, start.frame, w, beta, tau)
    }
}

/// Linearization of one observation's endpoint around its inner mode, in
/// both the latent increments and the geometric parameters.
struct LocalModel {
    /// `y - F(z*) + J z*`.
    offset: DVector<f64>,
    /// Sum of the per-step Jacobian blocks, `k x m`.
    step_sum: DMatrix<f64>,
    jjt: DMatrix<f64>,
    /// `sum_t J_t[:, a] J_t[:, b]^T`, indexed `a * m + b`; empty without
    /// random effects.
    cross: Vec<DMatrix<f64>>,
    geo: DMatrix<f64>,
    jacobian: DMatrix<f64>,
    x: DVector<f64>,
}

struct Surrogate<'a> {
    layout: &'a Layout,
    base: &'a ModelParameters,
    locals: Vec<LocalModel>,
    phi_k: DVector<f64>,
    random: Vec<bool>,
    steps: usize,
    total_time: f64,
}

impl Surrogate<'_> {
    fn random_cov(&self, w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let m = self.layout.m;
        self.random.iter().any(|&r| r).then(|| {
            let sel = DMatrix::from_fn(m, m, |a, b| if a == b && self.random[a] { 1.0 } else { 0.0 });
            w * sel * w.transpose()
        })
    }

    /// Residual and Cholesky factor of the marginal covariance of one
    /// observation under the linear model.
    fn marginal(
        &self,
        loc: &LocalModel,
        phi: &DVector<f64>,
        w: &DMatrix<f64>,
        beta: &DVector<f64>,
        tau: f64,
        a_mat: Option<&DMatrix<f64>>,
    ) -> Option<(DVector<f64>, Cholesky<f64, Dyn>)> {
        let ng = self.layout.geo_len();
        let m = self.layout.m;
        let dt = self.total_time / self.steps as f64;
        let delta = phi.rows(0, ng) - self.phi_k.rows(0, ng);
        let mu = beta * dt + w * &loc.x * (dt / self.total_time);
        let r = &loc.offset - &loc.step_sum * mu - &loc.geo * delta;
        let mut cov = &loc.jjt * dt;
        if let Some(a) = a_mat {
            for (idx, mab) in loc.cross.iter().enumerate() {
                cov += mab * (dt * a[(idx / m, idx % m)]);
            }
            cov -= &loc.step_sum * a * loc.step_sum.transpose() * (dt / self.steps as f64);
        }
        for i in 0..cov.nrows() {
            cov[(i, i)] += tau * tau;
        }
        cov.cholesky().map(|c| (r, c))
    }

    /// Sum over observations of the linear-Gaussian marginal log-density.
    fn value(&self, phi: &DVector<f64>) -> f64 {
        let (w, beta, tau) = self.layout.scalars(phi, self.base);
        if !(tau > 0.0 && tau.is_finite()) {
            return f64::NAN;
        }
        let a_mat = self.random_cov(&w);
        let mut total = 0.0;
        for loc in &self.locals {
            let Some((r, chol)) = self.marginal(loc, phi, &w, &beta, tau, a_mat.as_ref()) else {
                return f64::NAN;
            };
            let k = r.len();
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            total += -0.5 * r.dot(&chol.solve(&r)) - 0.5 * log_det - 0.5 * k as f64 * LN_2PI;
        }
        total
    }

    /// Posterior means of the latent increments under the linear model,
    /// used to warm-start the inner solves at `phi`.
    fn latent_means(&self, phi: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        let (w, beta, tau) = self.layout.scalars(phi, self.base);
        let a_mat = self.random_cov(&w);
        let m = self.layout.m;
        let dt = self.total_time / self.steps as f64;
        self.locals
            .iter()
            .map(|loc| {
                let (r, chol) = self.marginal(loc, phi, &w, &beta, tau, a_mat.as_ref())?;
                let g = unflatten(&loc.jacobian.tr_mul(&chol.solve(&r)), self.steps, m);
                let mu = (&beta * dt + &w * &loc.x * (dt / self.total_time)).transpose();
                let mut z = DMatrix::from_fn(self.steps, m, |t, j| mu[j] + dt * g[(t, j)]);
                if let Some(a) = &a_mat {
                    let g_mean = g.row_mean();
                    for t in 0..self.steps {
                        let corr = (g.row(t) - &g_mean) * a * dt;
                        let mut row = z.row_mut(t);
                        row += corr;
                    }
                }
                z.iter().all(|v| v.is_finite()).then_some(z)
            })
            .collect()
    }
}

fn build_locals(
    model: &Manifold,
    layout: &Layout,
    theta: &ModelParameters,
    dataset: &Dataset,
    config: &FitConfig,
    eval: &Evaluation,
) -> Result<Vec<LocalModel>> {
    let phi = layout.pack(theta);
    let h = config.fd_step;
    let starts = (0..layout.geo_len())
        .map(|c| {
            let mut p = phi.clone();
            p[c] += h;
            let plus = layout.start(model, &p, theta)?;
            p[c] -= 2.0 * h;
            let minus = layout.start(model, &p, theta)?;
            Ok((plus, minus))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = theta.num_covariates();
    let has_random = dataset.spec.has_random();
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let sol = &eval.solutions[i];
            let jac = &sol.lin.jacobian;
            let k = jac.nrows();
            let steps = sol.z.nrows();
            let offset = dataset.response(i) - &sol.lin.endpoint + jac * flatten(&sol.z);
            let mut step_sum = DMatrix::zeros(k, m);
            for t in 0..steps {
                step_sum += jac.columns(t * m, m);
            }
            let jjt = jac * jac.transpose();
            let mut cross = Vec::new();
            if has_random {
                for a in 0..m {
                    for b in 0..m {
                        let mut acc = DMatrix::zeros(k, k);
                        for t in 0..steps {
                            acc += jac.column(t * m + a) * jac.column(t * m + b).transpose();
                        }
                        cross.push(acc);
                    }
                }
            }
            let mut geo = DMatrix::zeros(k, starts.len());
            for (c, (plus, minus)) in starts.iter().enumerate() {
                let fp = model.embed(&develop_from(model, plus, &sol.z, 0, config.substeps)?.base)?;
                let fm = model.embed(&develop_from(model, minus, &sol.z, 0, config.substeps)?.base)?;
                geo.set_column(c, &((fp - fm) / (2.0 * h)));
            }
            Ok(LocalModel {
                offset,
                step_sum,
                jjt,
                cross,
                geo,
                jacobian: jac.clone(),
                x: dataset.covariates(i),
            })
        })
        .collect::<Result<Vec<_>>>()
}

/// Maximizes the Laplace log-likelihood over the estimated parameter blocks.
///
/// Each outer iteration linearizes every endpoint around its inner mode,
/// which makes the marginal likelihood Gaussian and cheap to evaluate. The
/// maximizer of that surrogate, clipped to a trust radius, is accepted only
/// if it increases the actual Laplace objective.
pub fn fit(model: &Manifold, dataset: &Dataset, config: &FitConfig, init: Option<&ModelParameters>) -> Result<FitResult> {
    config.validate()?;
    let theta0 = match init {
        Some(t) => t.clone(),
        None => initial_parameters(model, dataset, &InitOptions::default())?,
    };
    check_inputs(model, &theta0, dataset, config)?;
    let layout = Layout {
        d: model.dim(),
        m: theta0.num_covariates(),
        flags: config.estimate,
        fixed_frame: theta0.frame.clone(),
    };

    let mut theta = theta0;
    let mut eval = evaluate(model, &theta, dataset, config, None)?;
    let mut radius = config.outer.initial_radius;
    let mut trace = vec![OuterStep {
        iteration: 0,
        log_likelihood: eval.log_likelihood,
        radius,
        predicted: 0.0,
        actual: 0.0,
        accepted: true,
    }];
    let mut converged = layout.len() == 0;
    let mut iterations = 0;
    let mut locals = None;
    let random: Vec<bool> = (0..layout.m).map(|j| dataset.spec.is_random(j)).collect();

    while !converged && iterations < config.outer.max_iters {
        iterations += 1;
        let phi_k = layout.pack(&theta);
        let loc = match locals.take() {
            Some(l) => l,
            None => build_locals(model, &layout, &theta, dataset, config, &eval)?,
        };
        let sur = Surrogate {
            layout: &layout,
            base: &theta,
            locals: loc,
            phi_k: phi_k.clone(),
            random: random.clone(),
            steps: config.steps,
            total_time: config.total_time,
        };
        let s_k = sur.value(&phi_k);
        let opts = BfgsOptions {
            max_iters: 500,
            grad_tol: 1e-9 * s_k.abs().max(1.0),
            fd_step: 1e-6,
        };
        let opt = minimize_bfgs(|p| -sur.value(p), &phi_k, &opts);
        let mut step = &opt.x - &phi_k;
        let full = step.amax();
        let truncated = full > radius;
        if truncated {
            step *= radius / full;
        }
        let phi_new = &phi_k + &step;
        let predicted = sur.value(&phi_new) - s_k;
        let scale = eval.log_likelihood.abs().max(1.0);
        if !(predicted > 0.1 * config.outer.tol * scale) {
            converged = true;
            break;
        }

        let warm = sur
            .latent_means(&phi_new)
            .unwrap_or_else(|| eval.solutions.iter().map(|s| s.z.clone()).collect());
        let proposal = layout
            .unpack(model, &phi_new, &theta)
            .and_then(|t| evaluate(model, &t, dataset, config, Some(&warm)).map(|e| (t, e)));
        let step_len = step.amax();
        match proposal {
            Ok((t, e)) if e.log_likelihood > eval.log_likelihood => {
                let actual = e.log_likelihood - eval.log_likelihood;
                let rho = actual / predicted;
                if rho > 0.75 && truncated {
                    radius *= 2.0;
                } else if rho < 0.25 {
                    radius = 0.5 * radius.min(step_len);
                }
                trace.push(OuterStep {
                    iteration: iterations,
                    log_likelihood: e.log_likelihood,
                    radius,
                    predicted,
                    actual,
                    accepted: true,
                });
                theta = t;
                eval = e;
                if actual < config.outer.tol * scale {
                    converged = true;
                }
            }
            other => {
                let actual = match &other {
                    Ok((_, e)) => e.log_likelihood - eval.log_likelihood,
                    Err(_) => f64::NAN,
                };
                radius = 0.25 * step_len;
                trace.push(OuterStep {
                    iteration: iterations,
                    log_likelihood: eval.log_likelihood,
                    radius,
                    predicted,
                    actual,
                    accepted: false,
                });
                if (actual.abs() < config.outer.tol * scale && !truncated) || radius < 1e-10 {
                    converged = actual.abs() < config.outer.tol * scale;
                    break;
                }
                locals = Some(sur.locals);
            }
        }
    }

    let hessian = eval.hessian_summary(dataset.len())?;
    let inner = eval.inner_diagnostics();
    Ok(FitResult {
        log_likelihood: eval.log_likelihood,
        inner_modes: eval.latent(),
        diagnostics: FitDiagnostics {
            inner_grad_norms: inner.grad_norms,
            inner_iterations: inner.iterations,
            inner_converged: inner.converged,
            outer_trace: trace,
            hessian_log_det: hessian.log_det_sigma,
            floored_eigenvalues: hessian.floored,
            outer_iterations: iterations,
            converged,
        },
        theta_hat: theta,
    })
}
