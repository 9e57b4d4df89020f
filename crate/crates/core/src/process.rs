//! The driving-process regression model and its observation model.
//!
//! For observation `i` the driver is `dz = beta dt + W~ dX_i + d eps` in
//! `R^m`, where `X_i` runs from `0` to the covariates `x_i` (a straight line
//! for fixed effects, a Brownian bridge for random effects) and `eps` is a
//! standard Brownian motion. The driver is developed through the reduced
//! frame `(y0, U)` and the endpoint is observed with isotropic ambient noise
//! of standard deviation `tau`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::development::{develop_endpoint, DrivingPath};
use crate::error::{Error, Result};
use crate::frame::{frame_gram, orthonormalize_with_factor, FramePoint};
use crate::geometry::{Manifold, Point};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Regression parameters `(y0, U, W~, beta, tau)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub y0: Point,
    /// `d x m`, orthonormal under the metric at `y0`.
    pub frame: DMatrix<f64>,
    pub w_tilde: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub tau: f64,
}

impl ModelParameters {
    /// Validates the parameters against `model`, including metric
    /// orthonormality of the frame (tolerance `1e-8`).
    pub fn new(
        model: &Manifold,
        y0: Point,
        frame: DMatrix<f64>,
        w_tilde: DMatrix<f64>,
        beta: DVector<f64>,
        tau: f64,
    ) -> Result<Self> {
        let theta = Self {
            y0,
            frame,
            w_tilde,
            beta,
            tau,
        };
        theta.validate(model)?;
        Ok(theta)
    }

    /// Like [`ModelParameters::new`] but orthonormalizes `raw_frame` under
    /// the metric at `y0` first.
    pub fn with_raw_frame(
        model: &Manifold,
        y0: Point,
        raw_frame: &DMatrix<f64>,
        w_tilde: DMatrix<f64>,
        beta: DVector<f64>,
        tau: f64,
    ) -> Result<Self> {
        let (frame, _) = orthonormalize_with_factor(model, &y0, raw_frame)?;
        Self::new(model, y0, frame, w_tilde, beta, tau)
    }

    pub fn num_covariates(&self) -> usize {
        self.w_tilde.nrows()
    }

    pub fn validate(&self, model: &Manifold) -> Result<()> {
        let d = model.dim();
        let m = self.w_tilde.nrows();
        model.validate(&self.y0)?;
        if self.frame.shape() != (d, m) || self.w_tilde.ncols() != m || self.beta.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "frame {:?}, W_tilde {:?}, beta {} inconsistent with d = {d}",
                self.frame.shape(),
                self.w_tilde.shape(),
                self.beta.len()
            )));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be nonnegative, got {}", self.tau)));
        }
        let u = FramePoint::new(self.y0.clone(), self.frame.clone())?;
        let gram = frame_gram(model, &u)?;
        let err = (gram - DMatrix::identity(m, m)).amax();
        if err > 1e-8 {
            return Err(Error::DegenerateFrame(format!(
                "frame is not orthonormal under the metric (deviation {err:.3e})"
            )));
        }
        Ok(())
    }

    pub fn frame_point(&self) -> FramePoint {
        FramePoint {
            base: self.y0.clone(),
            frame: self.frame.clone(),
        }
    }

    /// The full frame matrix `W = U W~`.
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        &self.frame * &self.w_tilde
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Fixed,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub kinds: Vec<CovariateKind>,
}

impl CovariateSpec {
    pub fn all_fixed(m: usize) -> Self {
        Self {
            kinds: vec![CovariateKind::Fixed; m],
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn is_random(&self, j: usize) -> bool {
        self.kinds[j] == CovariateKind::Random
    }

    pub fn has_random(&self) -> bool {
        self.kinds.contains(&CovariateKind::Random)
    }
}

/// Covariates `X` (`n x m`) and ambient responses `Y` (`n x k`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub spec: CovariateSpec,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, spec: CovariateSpec) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::InvalidData(format!(
                "{} covariate rows but {} response rows",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        if spec.len() != x.ncols() {
            return Err(Error::InvalidData(format!(
                "covariate spec lists {} kinds for {} columns",
                spec.len(),
                x.ncols()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite value in dataset".into()));
        }
        Ok(Self { x, y, spec })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn num_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn covariates(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    pub fn response(&self, i: usize) -> DVector<f64> {
        self.y.row(i).transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    /// Include the Brownian noise `eps`.
    pub brownian: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { brownian: true }
    }
}

fn check_covariates(theta: &ModelParameters, x_i: &DVector<f64>, spec: &CovariateSpec) -> Result<()> {
    let m = theta.num_covariates();
    if x_i.len() != m || spec.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} covariates and {} kinds for m = {m}",
            x_i.len(),
            spec.len()
        )));
    }
    Ok(())
}

/// Deterministic part of the increments: `beta dt + W~ x_fixed dt / T` per
/// row, with random-effect coordinates of `x_i` zeroed.
pub fn mean_increments(
    theta: &ModelParameters,
    x_i: &DVector<f64>,
    spec: &CovariateSpec,
    steps: usize,
    total_time: f64,
) -> Result<DMatrix<f64>> {
    check_covariates(theta, x_i, spec)?;
    let x_fixed = DVector::from_fn(x_i.len(), |j, _| if spec.is_random(j) { 0.0 } else { x_i[j] });
    Ok(increment_rows(theta, &x_fixed, steps, total_time))
}

fn increment_rows(theta: &ModelParameters, x: &DVector<f64>, steps: usize, total_time: f64) -> DMatrix<f64> {
    let dt = total_time / steps as f64;
    let row = &theta.beta * dt + &theta.w_tilde * x * (dt / total_time);
    DMatrix::from_fn(steps, row.len(), |_, j| row[j])
}

/// Exact Gaussian law of the discretized driver of one observation.
///
/// With `B = I + W~ D W~^T` (`D` selecting random-effect coordinates) the
/// increment covariance is `dt [P1 (x) I + (I - P1) (x) B]`, where `P1`
/// projects onto constant sequences in time.
#[derive(Clone, Debug)]
pub struct LatentPrior {
    /// Expected increments, `steps x m`.
    pub mean: DMatrix<f64>,
    dt: f64,
    b_inv: DMatrix<f64>,
    log_det_cov: f64,
}

impl LatentPrior {
    pub fn new(
        theta: &ModelParameters,
        x_i: &DVector<f64>,
        spec: &CovariateSpec,
        steps: usize,
        total_time: f64,
    ) -> Result<Self> {
        check_covariates(theta, x_i, spec)?;
        if steps == 0 || !(total_time > 0.0) {
            return Err(Error::InvalidConfig("steps and total time must be positive".into()));
        }
        let m = theta.num_covariates();
        let dt = total_time / steps as f64;
        // bridges contribute their mean drift x / T
        let mean = increment_rows(theta, x_i, steps, total_time);
        let mut b = DMatrix::identity(m, m);
        if spec.has_random() {
            let selector = DMatrix::from_fn(m, m, |a, c| if a == c && spec.is_random(a) { 1.0 } else { 0.0 });
            b += &theta.w_tilde * selector * theta.w_tilde.transpose();
        }
        let chol = Cholesky::new(b).ok_or_else(|| Error::InvalidConfig("bridge covariance not positive definite".into()))?;
        let log_det_b = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_det_cov = (steps * m) as f64 * dt.ln() + (steps as f64 - 1.0) * log_det_b;
        Ok(Self {
            mean,
            dt,
            b_inv: chol.inverse(),
            log_det_cov,
        })
    }

    pub fn steps(&self) -> usize {
        self.mean.nrows()
    }

    pub fn width(&self) -> usize {
        self.mean.ncols()
    }

    pub fn log_det_cov(&self) -> f64 {
        self.log_det_cov
    }

    /// `P e` for increments `z`, where `e = z - mean` and `P` is the precision.
    pub fn precision_times_residual(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let e = z - &self.mean;
        let ebar = e.row_mean();
        let mut centered = e.clone();
        for mut row in centered.row_iter_mut() {
            row -= &ebar;
        }
        let mut out = centered * &self.b_inv;
        for mut row in out.row_iter_mut() {
            row += &ebar;
        }
        out / self.dt
    }

    /// `e^T P e`.
    pub fn quadratic(&self, z: &DMatrix<f64>) -> f64 {
        let pe = self.precision_times_residual(z);
        (z - &self.mean).component_mul(&pe).sum()
    }

    pub fn log_density(&self, z: &DMatrix<f64>) -> f64 {
        let dim = (self.steps() * self.width()) as f64;
        -0.5 * self.quadratic(z) - 0.5 * self.log_det_cov - 0.5 * dim * LN_2PI
    }

    /// Dense precision over the row-major flattening `t * m + j`.
    pub fn precision_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.steps(), self.width());
        let mut p = DMatrix::zeros(n * m, n * m);
        let nf = n as f64;
        let id = DMatrix::<f64>::identity(m, m);
        for s in 0..n {
            for t in 0..n {
                let delta = if s == t { 1.0 } else { 0.0 };
                for a in 0..m {
                    for c in 0..m {
                        p[(s * m + a, t * m + c)] =
                            (id[(a, c)] / nf + (delta - 1.0 / nf) * self.b_inv[(a, c)]) / self.dt;
                    }
                }
            }
        }
        p
    }
}

/// Log-density of the increments of `path` under the driver law.
pub fn latent_log_density(
    path: &DrivingPath,
    theta: &ModelParameters,
    x_i: &DVector<f64>,
    spec: &CovariateSpec,
) -> Result<f64> {
    if path.width() != theta.num_covariates() {
        return Err(Error::DimensionMismatch(format!(
            "path width {} for m = {}",
            path.width(),
            theta.num_covariates()
        )));
    }
    let prior = LatentPrior::new(theta, x_i, spec, path.steps(), path.total_time)?;
    Ok(prior.log_density(&path.increments))
}

pub fn sample_driving_path_with<R: rand::Rng>(
    theta: &ModelParameters,
    x_i: &DVector<f64>,
    spec: &CovariateSpec,
    steps: usize,
    total_time: f64,
    rng: &mut R,
    options: SamplingOptions,
) -> Result<DrivingPath> {
    let mut inc = mean_increments(theta, x_i, spec, steps, total_time)?;
    let m = x_i.len();
    let dt = total_time / steps as f64;

    if spec.has_random() {
        // sequential Brownian-bridge construction for random effects
        let mut bridge = DMatrix::zeros(steps, m);
        for j in (0..m).filter(|&j| spec.is_random(j)) {
            let mut pos = 0.0;
            for t in 0..steps {
                let remaining = total_time - t as f64 * dt;
                let step = if t + 1 == steps {
                    x_i[j] - pos
                } else {
                    let mean = (x_i[j] - pos) / remaining * dt;
                    let var = dt * (1.0 - dt / remaining);
                    let z: f64 = StandardNormal.sample(rng);
                    mean + var.max(0.0).sqrt() * z
                };
                bridge[(t, j)] = step;
                pos += step;
            }
        }
        inc += bridge * theta.w_tilde.transpose();
    }

    if options.brownian {
        let sd = dt.sqrt();
        for t in 0..steps {
            for j in 0..m {
                let z: f64 = StandardNormal.sample(rng);
                inc[(t, j)] += sd * z;
            }
        }
    }
    DrivingPath::new(inc, total_time)
}

pub fn sample_driving_path(
    theta: &ModelParameters,
    x_i: &DVector<f64>,
    spec: &CovariateSpec,
    steps: usize,
    total_time: f64,
    seed: u64,
    options: SamplingOptions,
) -> Result<DrivingPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_driving_path_with(theta, x_i, spec, steps, total_time, &mut rng, options)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    pub steps: usize,
    pub total_time: f64,
    pub substeps: usize,
    #[serde(default)]
    pub sampling: SamplingOptions,
}

/// One noisy ambient observation: the developed endpoint of a sampled
/// driver plus `N(0, tau^2 I_k)` noise.
pub fn simulate_observation(
    model: &Manifold,
    theta: &ModelParameters,
    x_i: &DVector<f64>,
    spec: &CovariateSpec,
    settings: &SimulationSettings,
    seed: u64,
) -> Result<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = sample_driving_path_with(
        theta,
        x_i,
        spec,
        settings.steps,
        settings.total_time,
        &mut rng,
        settings.sampling,
    )?;
    let mut y = develop_endpoint(model, &theta.frame_point(), &path, settings.substeps)?;
    if theta.tau > 0.0 {
        for v in y.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += theta.tau * z;
        }
    }
    Ok(y)
}

/// Simulates responses for every row of `x`, observation `i` using seed
/// [`derive_seed`]`(seed, i)`.
pub fn simulate_dataset(
    model: &Manifold,
    theta: &ModelParameters,
    x: &DMatrix<f64>,
    spec: &CovariateSpec,
    settings: &SimulationSettings,
    seed: u64,
) -> Result<Dataset> {
    use rayon::prelude::*;
    let rows = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            simulate_observation(model, theta, &x.row(i).transpose(), spec, settings, derive_seed(seed, i as u64))
                .map_err(|e| e.at_observation(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = model.ambient_dim();
    let y = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    Dataset::new(x.clone(), y, spec.clone())
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-observation seed: `splitmix64(master ^ splitmix64(index))`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn flat_theta(m: usize, d: usize) -> (Manifold, ModelParameters) {
        let model = Manifold::flat(d).unwrap();
        let frame = DMatrix::from_fn(d, m, |i, j| if i == j { 1.0 } else { 0.0 });
        let theta = ModelParameters::new(
            &model,
            DVector::zeros(d),
            frame,
            DMatrix::identity(m, m),
            DVector::zeros(m),
            0.0,
        )
        .unwrap();
        (model, theta)
    }

    #[test]
    fn mean_increments_telescope() {
        let (_, mut theta) = flat_theta(2, 3);
        let spec = CovariateSpec::all_fixed(2);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let inc = mean_increments(&theta, &x, &spec, 10, 1.0).unwrap();
        assert_abs_diff_eq!(inc[(3, 0)], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(inc.row_sum()[0], 1.0, epsilon = 1e-14);
        assert_eq!(inc.row_sum()[1], 0.0);

        theta.beta = DVector::from_vec(vec![1.0, 0.0]);
        let inc = mean_increments(&theta, &DVector::zeros(2), &spec, 7, 2.5).unwrap();
        assert_abs_diff_eq!(inc.row_sum()[0], 2.5, epsilon = 1e-14);

        theta.beta = DVector::zeros(2);
        theta.w_tilde = DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.1, 0.2]);
        let inc = mean_increments(&theta, &DVector::from_vec(vec![1.0, 1.0]), &spec, 30, 1.0).unwrap();
        assert_abs_diff_eq!(inc.row_sum()[0], 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(inc.row_sum()[1], 0.3, epsilon = 1e-14);
    }

    #[test]
    fn random_coordinates_drop_out_of_the_mean() {
        let (_, theta) = flat_theta(2, 2);
        let spec = CovariateSpec {
            kinds: vec![CovariateKind::Fixed, CovariateKind::Random],
        };
        let inc = mean_increments(&theta, &DVector::from_vec(vec![2.0, 5.0]), &spec, 4, 1.0).unwrap();
        assert_abs_diff_eq!(inc.row_sum()[0], 2.0, epsilon = 1e-14);
        assert_eq!(inc.row_sum()[1], 0.0);
    }

    #[test]
    fn degenerate_sampling_returns_the_mean() {
        let (_, theta) = flat_theta(2, 2);
        let spec = CovariateSpec::all_fixed(2);
        let x = DVector::from_vec(vec![0.4, -1.0]);
        let path = sample_driving_path(&theta, &x, &spec, 6, 1.0, 3, SamplingOptions { brownian: false }).unwrap();
        assert_eq!(path.increments, mean_increments(&theta, &x, &spec, 6, 1.0).unwrap());
    }

    #[test]
    fn bridge_hits_its_endpoint() {
        let (_, mut theta) = flat_theta(2, 2);
        theta.w_tilde = DMatrix::identity(2, 2);
        let spec = CovariateSpec {
            kinds: vec![CovariateKind::Random, CovariateKind::Random],
        };
        let x = DVector::from_vec(vec![1.7, -0.3]);
        for seed in 0..20 {
            let path = sample_driving_path(&theta, &x, &spec, 25, 1.0, seed, SamplingOptions { brownian: false }).unwrap();
            let sum = path.increments.row_sum();
            assert_abs_diff_eq!(sum[0], 1.7, epsilon = 1e-12);
            assert_abs_diff_eq!(sum[1], -0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn scalar_density_by_hand() {
        let model = Manifold::flat(1).unwrap();
        let theta = ModelParameters::new(
            &model,
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, 0.2),
            1.0,
        )
        .unwrap();
        let spec = CovariateSpec::all_fixed(1);
        let x = DVector::from_element(1, 2.0);
        let mean = mean_increments(&theta, &x, &spec, 1, 1.0).unwrap()[(0, 0)];
        let path = DrivingPath::new(DMatrix::from_element(1, 1, mean + 1.0), 1.0).unwrap();
        let lp = latent_log_density(&path, &theta, &x, &spec).unwrap();
        assert_abs_diff_eq!(lp, -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn mean_path_maximizes_density() {
        let (_, mut theta) = flat_theta(2, 2);
        theta.w_tilde = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.4, 0.2]);
        let spec = CovariateSpec {
            kinds: vec![CovariateKind::Fixed, CovariateKind::Random],
        };
        let x = DVector::from_vec(vec![0.5, 1.5]);
        let prior = LatentPrior::new(&theta, &x, &spec, 5, 1.0).unwrap();
        let at_mean = prior.log_density(&prior.mean);
        let dim = 10.0;
        assert_abs_diff_eq!(
            at_mean,
            -0.5 * prior.log_det_cov() - 0.5 * dim * LN_2PI,
            epsilon = 1e-12
        );
        let mut bumped = prior.mean.clone();
        bumped[(2, 1)] += 0.01;
        assert!(prior.log_density(&bumped) < at_mean);
    }

    #[test]
    fn dense_precision_inverts_the_bridge_covariance() {
        let (_, mut theta) = flat_theta(2, 2);
        theta.w_tilde = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.4, 0.2]);
        let spec = CovariateSpec {
            kinds: vec![CovariateKind::Random, CovariateKind::Fixed],
        };
        let (n, m, dt) = (4usize, 2usize, 0.25);
        let prior = LatentPrior::new(&theta, &DVector::from_vec(vec![1.0, 2.0]), &spec, n, 1.0).unwrap();
        // covariance assembled directly: dt I + W~ D W~^T * dt (delta_st - 1/n)
        let wd = &theta.w_tilde * DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])) * theta.w_tilde.transpose();
        let cov = DMatrix::from_fn(n * m, n * m, |r, c| {
            let (s, a, t, b) = (r / m, r % m, c / m, c % m);
            let delta = if s == t { 1.0 } else { 0.0 };
            let eps = if r == c { dt } else { 0.0 };
            eps + wd[(a, b)] * dt * (delta - 1.0 / n as f64)
        });
        let prod = prior.precision_matrix() * &cov;
        assert_abs_diff_eq!(prod, DMatrix::identity(n * m, n * m), epsilon = 1e-12);
        let log_det = cov.clone().cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
        assert_abs_diff_eq!(prior.log_det_cov(), log_det, epsilon = 1e-12);
    }

    #[test]
    fn flat_noiseless_observation_is_linear_regression() {
        let model = Manifold::flat(3).unwrap();
        let frame = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.6, 0.0, 0.8]);
        let theta = ModelParameters::new(
            &model,
            DVector::from_vec(vec![0.5, -1.0, 2.0]),
            frame,
            DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.1, 0.2]),
            DVector::from_vec(vec![0.3, -0.2]),
            0.0,
        )
        .unwrap();
        let spec = CovariateSpec::all_fixed(2);
        let x = DVector::from_vec(vec![1.5, -2.0]);
        let settings = SimulationSettings {
            steps: 8,
            total_time: 2.0,
            substeps: 2,
            sampling: SamplingOptions { brownian: false },
        };
        let y = simulate_observation(&model, &theta, &x, &spec, &settings, 11).unwrap();
        let expected = &theta.y0 + &theta.frame * (&theta.w_tilde * &x + &theta.beta * 2.0);
        assert_abs_diff_eq!(y, expected, epsilon = 1e-13);
    }

    #[test]
    fn simulation_is_reproducible() {
        let model = Manifold::landmarks(2, 0.5).unwrap();
        let y0 = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]);
        let raw = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
        let theta = ModelParameters::with_raw_frame(
            &model,
            y0,
            &raw,
            DMatrix::from_element(1, 1, 0.3),
            DVector::zeros(1),
            0.1,
        )
        .unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[1.0, -1.0, 0.5]);
        let settings = SimulationSettings {
            steps: 5,
            total_time: 1.0,
            substeps: 2,
            sampling: SamplingOptions::default(),
        };
        let spec = CovariateSpec::all_fixed(1);
        let a = simulate_dataset(&model, &theta, &x, &spec, &settings, 99).unwrap();
        let b = simulate_dataset(&model, &theta, &x, &spec, &settings, 99).unwrap();
        assert_eq!(a, b);
        let c = simulate_dataset(&model, &theta, &x, &spec, &settings, 100).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn non_orthonormal_frames_are_rejected() {
        let model = Manifold::flat(2).unwrap();
        let err = ModelParameters::new(
            &model,
            DVector::zeros(2),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            0.1,
        );
        assert!(matches!(err, Err(Error::DegenerateFrame(_))));
    }
}
