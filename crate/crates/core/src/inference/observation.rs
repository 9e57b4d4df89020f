//! Per-observation pieces of the Laplace objective.

use nalgebra::{DMatrix, DVector};

use crate::development::develop_step;
use crate::error::{Error, Result};
use crate::frame::FramePoint;
use crate::geometry::Manifold;
use crate::process::LatentPrior;

use super::{HessianMode, InnerConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub(crate) const EIGEN_FLOOR: f64 = 1e-10;

pub(crate) fn flatten(z: &DMatrix<f64>) -> DVector<f64> {
    let m = z.ncols();
    DVector::from_fn(z.len(), |i, _| z[(i / m, i % m)])
}

pub(crate) fn unflatten(v: &DVector<f64>, steps: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(steps, m, |t, j| v[t * m + j])
}

/// Endpoint, value and endpoint Jacobian at a latent point.
#[derive(Clone, Debug)]
pub(crate) struct Linearization {
    pub endpoint: DVector<f64>,
    /// `k x (steps * m)`, columns in row-major latent order.
    pub jacobian: DMatrix<f64>,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct InnerSolution {
    pub z: DMatrix<f64>,
    pub lin: Linearization,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockHessian {
    pub log_det: f64,
    pub floored: usize,
    pub size: usize,
}

/// `g(z) = |y - F(z)|^2 / (2 tau^2) + (k/2) log(2 pi tau^2) - log p(z)`,
/// the negative log joint density of one observation and its driver.
pub(crate) struct ObservationProblem<'a> {
    pub model: &'a Manifold,
    pub start: &'a FramePoint,
    pub y: DVector<f64>,
    pub prior: LatentPrior,
    pub tau: f64,
    pub substeps: usize,
    pub fd_step: f64,
}

impl ObservationProblem<'_> {
    fn advance(&self, u: &FramePoint, z: &DMatrix<f64>, t: usize) -> Result<FramePoint> {
        let dx = z.row(t).transpose();
        develop_step(self.model, u, &dx, self.substeps).map_err(|e| e.at_step(t))
    }

    /// Frame states `u_0, ..., u_{steps}` along the developed path.
    pub fn states(&self, z: &DMatrix<f64>) -> Result<Vec<FramePoint>> {
        let mut states = Vec::with_capacity(z.nrows() + 1);
        states.push(self.start.clone());
        for t in 0..z.nrows() {
            let next = self.advance(&states[t], z, t)?;
            states.push(next);
        }
        Ok(states)
    }

    fn finish(&self, u: &FramePoint, z: &DMatrix<f64>, from: usize) -> Result<DVector<f64>> {
        let mut cur = u.clone();
        for t in from..z.nrows() {
            cur = self.advance(&cur, z, t)?;
        }
        self.model.embed(&cur.base)
    }

    pub fn endpoint(&self, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.finish(self.start, z, 0)
    }

    pub fn value_at(&self, z: &DMatrix<f64>, endpoint: &DVector<f64>) -> f64 {
        let k = self.y.len() as f64;
        let t2 = self.tau * self.tau;
        (&self.y - endpoint).norm_squared() / (2.0 * t2) + 0.5 * k * (LN_2PI + t2.ln()) - self.prior.log_density(z)
    }

    pub fn value(&self, z: &DMatrix<f64>) -> Result<f64> {
        let end = self.endpoint(z)?;
        Ok(self.value_at(z, &end))
    }

    /// Central differences of the endpoint in each increment. Perturbing
    /// increment `t` only re-develops the path from state `t`.
    pub fn linearize(&self, z: &DMatrix<f64>) -> Result<Linearization> {
        let (steps, m) = z.shape();
        let states = self.states(z)?;
        let endpoint = self.model.embed(&states[steps].base)?;
        let h = self.fd_step;
        let mut jacobian = DMatrix::zeros(endpoint.len(), steps * m);
        let mut zp = z.clone();
        for t in 0..steps {
            for j in 0..m {
                let orig = zp[(t, j)];
                zp[(t, j)] = orig + h;
                let plus = self.finish(&states[t], &zp, t)?;
                zp[(t, j)] = orig - h;
                let minus = self.finish(&states[t], &zp, t)?;
                zp[(t, j)] = orig;
                jacobian.set_column(t * m + j, &((plus - minus) / (2.0 * h)));
            }
        }
        let value = self.value_at(z, &endpoint);
        Ok(Linearization {
            endpoint,
            jacobian,
            value,
        })
    }

    /// Gradient of `g` in row-major latent order.
    pub fn gradient(&self, z: &DMatrix<f64>, lin: &Linearization) -> DVector<f64> {
        let r = &self.y - &lin.endpoint;
        let like = lin.jacobian.tr_mul(&r) / (-self.tau * self.tau);
        like + flatten(&self.prior.precision_times_residual(z))
    }

    pub fn gauss_newton_hessian(&self, lin: &Linearization) -> DMatrix<f64> {
        lin.jacobian.tr_mul(&lin.jacobian) / (self.tau * self.tau) + self.prior.precision_matrix()
    }

    /// Levenberg-Marquardt on `g` from `z0`.
    pub fn solve(&self, z0: &DMatrix<f64>, cfg: &InnerConfig) -> Result<InnerSolution> {
        let (steps, m) = z0.shape();
        let mut z = z0.clone();
        let mut lin = self.linearize(&z)?;
        if !lin.value.is_finite() {
            return Err(Error::BadInitialization(format!("objective is {} at the starting path", lin.value)));
        }
        let precision = self.prior.precision_matrix();
        let mut lambda = 0.0;
        let mut iterations = 0;
        loop {
            let grad = self.gradient(&z, &lin);
            let grad_norm = grad.norm();
            if grad_norm <= cfg.grad_tol || iterations >= cfg.max_iters {
                return Ok(InnerSolution {
                    converged: grad_norm <= cfg.grad_tol,
                    z,
                    lin,
                    grad_norm,
                    iterations,
                });
            }
            iterations += 1;
            let hess = lin.jacobian.tr_mul(&lin.jacobian) / (self.tau * self.tau) + &precision;
            let mut moved = false;
            for _ in 0..40 {
                let mut damped = hess.clone();
                for i in 0..damped.nrows() {
                    damped[(i, i)] *= 1.0 + lambda;
                }
                let Some(chol) = damped.cholesky() else {
                    lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
                    continue;
                };
                let step = unflatten(&chol.solve(&(-&grad)), steps, m);
                let trial = &z + &step;
                let ok = match self.value(&trial) {
                    Ok(v) => v.is_finite() && v <= lin.value + 4.0 * f64::EPSILON * lin.value.abs(),
                    Err(_) => false,
                };
                if ok {
                    z = trial;
                    lin = self.linearize(&z)?;
                    lambda = if lambda < 1e-9 { 0.0 } else { lambda / 10.0 };
                    moved = true;
                    break;
                }
                lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
            }
            if !moved {
                let grad_norm = self.gradient(&z, &lin).norm();
                return Ok(InnerSolution {
                    converged: grad_norm <= cfg.grad_tol,
                    z,
                    lin,
                    grad_norm,
                    iterations,
                });
            }
        }
    }

    /// Hessian of `g` by central differences of the gradient.
    pub fn fd_hessian(&self, z: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
        let (steps, m) = z.shape();
        let dim = steps * m;
        let mut hess = DMatrix::zeros(dim, dim);
        let mut zp = z.clone();
        for c in 0..dim {
            let (t, j) = (c / m, c % m);
            let orig = zp[(t, j)];
            zp[(t, j)] = orig + step;
            let gp = self.gradient(&zp, &self.linearize(&zp)?);
            zp[(t, j)] = orig - step;
            let gm = self.gradient(&zp, &self.linearize(&zp)?);
            zp[(t, j)] = orig;
            hess.set_column(c, &((gp - gm) / (2.0 * step)));
        }
        Ok(hess)
    }

    pub fn hessian(&self, sol: &InnerSolution, mode: HessianMode, step: f64) -> Result<BlockHessian> {
        let hess = match mode {
            HessianMode::FiniteDifference => self.fd_hessian(&sol.z, step)?,
            HessianMode::GaussNewton => self.gauss_newton_hessian(&sol.lin),
        };
        Ok(floored_log_det(&hess))
    }
}

/// Log-determinant of the symmetrized matrix with eigenvalues floored at
/// [`EIGEN_FLOOR`].
pub(crate) fn floored_log_det(h: &DMatrix<f64>) -> BlockHessian {
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut floored = 0;
    let mut log_det = 0.0;
    for &ev in eig.eigenvalues.iter() {
        if ev < EIGEN_FLOOR || !ev.is_finite() {
            floored += 1;
            log_det += EIGEN_FLOOR.ln();
        } else {
            log_det += ev.ln();
        }
    }
    BlockHessian {
        log_det,
        floored,
        size: h.nrows(),
    }
}
