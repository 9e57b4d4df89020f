//! Manifold models: flat space, the round 2-sphere in a spherical chart, and
//! the LDDMM landmark manifold with a Gaussian kernel.
//!
//! Every model exposes metric, cometric, metric derivatives and Levi-Civita
//! Christoffel symbols in chart coordinates, plus an embedding into the
//! ambient space where observations live.

use std::f64::consts::PI;
use std::ops::{Index, IndexMut};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chart coordinates of a point. For landmarks this is the stacked
/// configuration `(x_1, y_1, ..., x_n, y_n)`.
pub type Point = DVector<f64>;

/// Largest admissible condition number of a kernel matrix.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// Distance kept from the poles in the spherical chart.
pub const DEFAULT_POLE_MARGIN: f64 = 1e-3;

/// Dense `d x d x d` array, used for metric derivatives (`[i][j][l] = d_i g_jl`)
/// and Christoffel symbols (`[k][i][j] = Gamma^k_ij`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.abs()).fold(0.0, f64::max)
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;

    fn index(&self, (a, b, c): (usize, usize, usize)) -> &f64 {
        &self.data[(a * self.dim + b) * self.dim + c]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (a, b, c): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(a * self.dim + b) * self.dim + c]
    }
}

/// Metric, cometric and metric derivative at one point.
#[derive(Clone, Debug)]
pub struct MetricTensors {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub dg: Tensor3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldKind {
    Flat,
    Sphere2,
    Landmarks,
}

/// Manifold section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldConfig {
    pub kind: ManifoldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_landmarks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkManifold {
    num_landmarks: usize,
    sigma: f64,
    condition_cap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Manifold {
    Flat { dim: usize },
    Sphere2 { pole_margin: f64 },
    Landmarks(LandmarkManifold),
}

impl Manifold {
    pub fn flat(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("flat dimension must be positive".into()));
        }
        Ok(Manifold::Flat { dim })
    }

    pub fn sphere2() -> Self {
        Manifold::Sphere2 {
            pole_margin: DEFAULT_POLE_MARGIN,
        }
    }

    pub fn landmarks(num_landmarks: usize, kernel_sigma: f64) -> Result<Self> {
        if num_landmarks == 0 {
            return Err(Error::InvalidConfig("num_landmarks must be positive".into()));
        }
        if !(kernel_sigma > 0.0 && kernel_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kernel_sigma must be positive, got {kernel_sigma}"
            )));
        }
        Ok(Manifold::Landmarks(LandmarkManifold {
            num_landmarks,
            sigma: kernel_sigma,
            condition_cap: DEFAULT_CONDITION_CAP,
        }))
    }

    pub fn from_config(config: &ManifoldConfig) -> Result<Self> {
        match config.kind {
            ManifoldKind::Flat => Manifold::flat(
                config
                    .dim
                    .ok_or_else(|| Error::InvalidConfig("flat manifold needs `dim`".into()))?,
            ),
            ManifoldKind::Sphere2 => Ok(Manifold::sphere2()),
            ManifoldKind::Landmarks => Manifold::landmarks(
                config.num_landmarks.ok_or_else(|| {
                    Error::InvalidConfig("landmark manifold needs `num_landmarks`".into())
                })?,
                config.kernel_sigma.ok_or_else(|| {
                    Error::InvalidConfig("landmark manifold needs `kernel_sigma`".into())
                })?,
            ),
        }
    }

    pub fn config(&self) -> ManifoldConfig {
        match self {
            Manifold::Flat { dim } => ManifoldConfig {
                kind: ManifoldKind::Flat,
                dim: Some(*dim),
                num_landmarks: None,
                kernel_sigma: None,
            },
            Manifold::Sphere2 { .. } => ManifoldConfig {
                kind: ManifoldKind::Sphere2,
                dim: None,
                num_landmarks: None,
                kernel_sigma: None,
            },
            Manifold::Landmarks(lm) => ManifoldConfig {
                kind: ManifoldKind::Landmarks,
                dim: None,
                num_landmarks: Some(lm.num_landmarks),
                kernel_sigma: Some(lm.sigma),
            },
        }
    }

    pub fn kind(&self) -> ManifoldKind {
        match self {
            Manifold::Flat { .. } => ManifoldKind::Flat,
            Manifold::Sphere2 { .. } => ManifoldKind::Sphere2,
            Manifold::Landmarks(_) => ManifoldKind::Landmarks,
        }
    }

    /// Intrinsic dimension `d`.
    pub fn dim(&self) -> usize {
        match self {
            Manifold::Flat { dim } => *dim,
            Manifold::Sphere2 { .. } => 2,
            Manifold::Landmarks(lm) => 2 * lm.num_landmarks,
        }
    }

    /// Dimension `k` of the ambient space.
    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Sphere2 { .. } => 3,
            _ => self.dim(),
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, Manifold::Flat { .. })
    }

    pub fn validate(&self, p: &Point) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::InvalidPoint(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                p.len()
            )));
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidPoint("non-finite coordinate".into()));
        }
        if let Manifold::Sphere2 { pole_margin } = self {
            let theta = p[0];
            if theta <= *pole_margin || theta >= PI - pole_margin {
                return Err(Error::InvalidPoint(format!(
                    "polar angle {theta} outside the chart"
                )));
            }
        }
        Ok(())
    }

    pub fn cometric(&self, p: &Point) -> Result<DMatrix<f64>> {
        self.validate(p)?;
        Ok(match self {
            Manifold::Flat { dim } => DMatrix::identity(*dim, *dim),
            Manifold::Sphere2 { .. } => {
                let s = p[0].sin();
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0 / (s * s)]))
            }
            Manifold::Landmarks(lm) => {
                let k = lm.kernel_matrix(p);
                // surfaces the singular-geometry error for coincident landmarks
                lm.factor(k.clone())?;
                k
            }
        })
    }

    pub fn metric(&self, p: &Point) -> Result<DMatrix<f64>> {
        self.validate(p)?;
        Ok(match self {
            Manifold::Flat { dim } => DMatrix::identity(*dim, *dim),
            Manifold::Sphere2 { .. } => {
                let s = p[0].sin();
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, s * s]))
            }
            Manifold::Landmarks(lm) => lm.factor(lm.kernel_matrix(p))?.inverse(),
        })
    }

    /// `dg[(i, j, l)] = d g_jl / d coords_i`.
    pub fn metric_derivative(&self, p: &Point) -> Result<Tensor3> {
        self.validate(p)?;
        let d = self.dim();
        let mut dg = Tensor3::zeros(d);
        match self {
            Manifold::Flat { .. } => {}
            Manifold::Sphere2 { .. } => {
                let (s, c) = p[0].sin_cos();
                dg[(0, 1, 1)] = 2.0 * s * c;
            }
            Manifold::Landmarks(lm) => {
                let g = lm.factor(lm.kernel_matrix(p))?.inverse();
                for i in 0..d {
                    let dk = lm.kernel_partial(p, i);
                    let dgi = -(&g * dk * &g);
                    for j in 0..d {
                        for l in 0..d {
                            dg[(i, j, l)] = dgi[(j, l)];
                        }
                    }
                }
            }
        }
        Ok(dg)
    }

    pub fn metric_tensors(&self, p: &Point) -> Result<MetricTensors> {
        Ok(MetricTensors {
            g: self.metric(p)?,
            g_inv: self.cometric(p)?,
            dg: self.metric_derivative(p)?,
        })
    }

    /// Levi-Civita Christoffel symbols, `[(k, i, j)] = Gamma^k_ij`.
    pub fn christoffel(&self, p: &Point) -> Result<Tensor3> {
        let g_inv = self.cometric(p)?;
        let dg = self.metric_derivative(p)?;
        Ok(christoffel_from_parts(&g_inv, &dg))
    }

    /// Contraction `Gamma^k_ij v^i w^j` for every column `w` of `ws`,
    /// returned as the columns of a `d x r` matrix.
    ///
    /// For landmarks this avoids the full tensor and uses
    /// `Gamma(v, w) = -1/2 (D_v K) K^-1 w - 1/2 (D_w K) K^-1 v + 1/2 K c`
    /// with `c_l = (K^-1 v)^T (d_l K) (K^-1 w)`.
    pub fn connection(&self, p: &Point, v: &DVector<f64>, ws: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        match self {
            Manifold::Flat { .. } => {
                if p.len() != d {
                    return Err(Error::InvalidPoint(format!(
                        "expected {d} coordinates, got {}",
                        p.len()
                    )));
                }
                Ok(DMatrix::zeros(d, ws.ncols()))
            }
            Manifold::Sphere2 { .. } => {
                self.validate(p)?;
                let (s, c) = p[0].sin_cos();
                let cot = c / s;
                let mut out = DMatrix::zeros(2, ws.ncols());
                for (j, w) in ws.column_iter().enumerate() {
                    // Gamma^theta_phiphi = -sin cos, Gamma^phi_thetaphi = cot
                    out[(0, j)] = -s * c * v[1] * w[1];
                    out[(1, j)] = cot * (v[0] * w[1] + v[1] * w[0]);
                }
                Ok(out)
            }
            Manifold::Landmarks(lm) => {
                self.validate(p)?;
                lm.connection(p, v, ws)
            }
        }
    }

    pub fn embed(&self, p: &Point) -> Result<DVector<f64>> {
        self.validate(p)?;
        Ok(match self {
            Manifold::Sphere2 { .. } => {
                let (st, ct) = p[0].sin_cos();
                let (sp, cp) = p[1].sin_cos();
                DVector::from_vec(vec![st * cp, st * sp, ct])
            }
            _ => p.clone(),
        })
    }

    /// Jacobian of the embedding, `k x d`.
    pub fn embed_differential(&self, p: &Point) -> Result<DMatrix<f64>> {
        self.validate(p)?;
        Ok(match self {
            Manifold::Sphere2 { .. } => {
                let (st, ct) = p[0].sin_cos();
                let (sp, cp) = p[1].sin_cos();
                DMatrix::from_row_slice(3, 2, &[ct * cp, -st * sp, ct * sp, st * cp, -st, 0.0])
            }
            _ => DMatrix::identity(self.dim(), self.dim()),
        })
    }

    /// Maps an ambient vector to chart coordinates of the nearest point.
    pub fn chart_from_ambient(&self, y: &DVector<f64>) -> Result<Point> {
        if y.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch(format!(
                "ambient vector has length {}, expected {}",
                y.len(),
                self.ambient_dim()
            )));
        }
        let p = match self {
            Manifold::Sphere2 { pole_margin } => {
                let norm = y.norm();
                if norm == 0.0 {
                    return Err(Error::InvalidPoint("cannot project the origin onto the sphere".into()));
                }
                let theta = (y[2] / norm)
                    .clamp(-1.0, 1.0)
                    .acos()
                    .clamp(2.0 * pole_margin, PI - 2.0 * pole_margin);
                DVector::from_vec(vec![theta, y[1].atan2(y[0])])
            }
            _ => y.clone(),
        };
        self.validate(&p)?;
        Ok(p)
    }
}

/// Assembles `Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)`.
pub fn christoffel_from_parts(g_inv: &DMatrix<f64>, dg: &Tensor3) -> Tensor3 {
    let d = dg.dim();
    let mut lowered = Tensor3::zeros(d);
    for i in 0..d {
        for j in 0..d {
            for l in 0..d {
                lowered[(l, i, j)] = 0.5 * (dg[(i, j, l)] + dg[(j, i, l)] - dg[(l, i, j)]);
            }
        }
    }
    let mut gamma = Tensor3::zeros(d);
    for k in 0..d {
        for l in 0..d {
            let gkl = g_inv[(k, l)];
            if gkl == 0.0 {
                continue;
            }
            for i in 0..d {
                for j in 0..d {
                    gamma[(k, i, j)] += gkl * lowered[(l, i, j)];
                }
            }
        }
    }
    gamma
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

impl LandmarkManifold {
    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn kernel(&self, sq_dist: f64) -> f64 {
        (-sq_dist / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn kernel_values(&self, q: &Point) -> Vec<f64> {
        self.kernel_values_slice(q.as_slice())
    }

    fn kernel_values_slice(&self, q: &[f64]) -> Vec<f64> {
        let n = self.num_landmarks;
        let mut kv = vec![1.0; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let dx = q[2 * a] - q[2 * b];
                let dy = q[2 * a + 1] - q[2 * b + 1];
                let k = self.kernel(dx * dx + dy * dy);
                kv[a * n + b] = k;
                kv[b * n + a] = k;
            }
        }
        kv
    }

    fn kernel_matrix_from(&self, kv: &[f64]) -> DMatrix<f64> {
        let n = self.num_landmarks;
        let mut k = DMatrix::zeros(2 * n, 2 * n);
        for a in 0..n {
            for b in 0..n {
                let v = kv[a * n + b];
                k[(2 * a, 2 * b)] = v;
                k[(2 * a + 1, 2 * b + 1)] = v;
            }
        }
        k
    }

    /// Block kernel matrix with blocks `exp(-|x_a - x_b|^2 / (2 sigma^2)) I_2`.
    pub fn kernel_matrix(&self, q: &Point) -> DMatrix<f64> {
        self.kernel_matrix_from(&self.kernel_values(q))
    }

    /// `d K / d q_i`.
    fn kernel_partial(&self, q: &Point, i: usize) -> DMatrix<f64> {
        let n = self.num_landmarks;
        let (p, alpha) = (i / 2, i % 2);
        let s2 = self.sigma * self.sigma;
        let mut dk = DMatrix::zeros(2 * n, 2 * n);
        for b in 0..n {
            if b == p {
                continue;
            }
            let dx = q[2 * p] - q[2 * b];
            let dy = q[2 * p + 1] - q[2 * b + 1];
            let diff = [dx, dy];
            let v = -self.kernel(dx * dx + dy * dy) * diff[alpha] / s2;
            for c in 0..2 {
                dk[(2 * p + c, 2 * b + c)] = v;
                dk[(2 * b + c, 2 * p + c)] = v;
            }
        }
        dk
    }

    /// Cholesky factor of the kernel matrix, rejecting near-singular
    /// configurations. The condition number is estimated from the squared
    /// ratio of extreme pivots.
    fn factor(&self, k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        let chol = Cholesky::new(k).ok_or(Error::SingularGeometry {
            condition: f64::INFINITY,
        })?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..l.nrows() {
            lo = lo.min(l[(i, i)]);
            hi = hi.max(l[(i, i)]);
        }
        let condition = (hi / lo).powi(2);
        if !(condition <= self.condition_cap) {
            return Err(Error::SingularGeometry { condition });
        }
        Ok(chol)
    }

    /// Cholesky factor (row-major lower triangle) of the scalar kernel
    /// matrix; the block matrix is `K_scalar (x) I_2`, so one factor serves
    /// both coordinates.
    fn scalar_factor(&self, kv: &[f64]) -> Result<Vec<f64>> {
        let n = self.num_landmarks;
        let mut l = vec![0.0; n * n];
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..n {
            for j in 0..=i {
                let (li, lj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                let s = kv[i * n + j] - li.iter().zip(lj).map(|(a, b)| a * b).sum::<f64>();
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::SingularGeometry {
                            condition: f64::INFINITY,
                        });
                    }
                    let piv = s.sqrt();
                    lo = lo.min(piv);
                    hi = hi.max(piv);
                    l[i * n + i] = piv;
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        let condition = (hi / lo).powi(2);
        if !(condition <= self.condition_cap) {
            return Err(Error::SingularGeometry { condition });
        }
        Ok(l)
    }

    /// Solves `K_scalar x = b` in place given the factor from
    /// [`Self::scalar_factor`] and the reciprocal pivots.
    fn scalar_solve(l: &[f64], inv_diag: &[f64], b: &mut [f64]) {
        let n = b.len();
        for i in 0..n {
            let s = b[i] - l[i * n..i * n + i].iter().zip(&b[..i]).map(|(x, y)| x * y).sum::<f64>();
            b[i] = s * inv_diag[i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s * inv_diag[i];
        }
    }

    fn connection(&self, q: &Point, v: &DVector<f64>, ws: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.num_landmarks;
        let d = 2 * n;
        let r = ws.ncols();
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let q = q.as_slice();
        let kv = self.kernel_values_slice(q);
        let l = self.scalar_factor(&kv)?;
        let inv_diag: Vec<f64> = (0..n).map(|i| 1.0 / l[i * n + i]).collect();

        // kernel derivative factors -k(x_p - x_b) (x_p - x_b) / sigma^2
        let mut gx = vec![0.0; n * n];
        let mut gy = vec![0.0; n * n];
        for p in 0..n {
            for b in 0..n {
                let f = -kv[p * n + b] * inv_s2;
                gx[p * n + b] = f * (q[2 * p] - q[2 * b]);
                gy[p * n + b] = f * (q[2 * p + 1] - q[2 * b + 1]);
            }
        }

        // split interleaved vectors into x and y components
        let split = |src: &[f64]| -> (Vec<f64>, Vec<f64>) {
            (src.iter().step_by(2).copied().collect(), src.iter().skip(1).step_by(2).copied().collect())
        };
        let (vx, vy) = split(v.as_slice());
        let (mut bx, mut by) = (vx.clone(), vy.clone());
        Self::scalar_solve(&l, &inv_diag, &mut bx);
        Self::scalar_solve(&l, &inv_diag, &mut by);

        // out += (D_u K) a, evaluated blockwise
        let dir_apply = |ux: &[f64], uy: &[f64], ax: &[f64], ay: &[f64], ox: &mut [f64], oy: &mut [f64]| {
            for p in 0..n {
                let (gxr, gyr) = (&gx[p * n..(p + 1) * n], &gy[p * n..(p + 1) * n]);
                let (upx, upy) = (ux[p], uy[p]);
                let (mut sx, mut sy) = (0.0, 0.0);
                for ((((gxv, gyv), (uxb, uyb)), axb), ayb) in
                    gxr.iter().zip(gyr).zip(ux.iter().zip(uy)).zip(ax).zip(ay)
                {
                    let coef = gxv * (upx - uxb) + gyv * (upy - uyb);
                    sx += coef * axb;
                    sy += coef * ayb;
                }
                ox[p] += sx;
                oy[p] += sy;
            }
        };

        let mut out = DMatrix::zeros(d, r);
        let (mut tx, mut ty) = (vec![0.0; n], vec![0.0; n]);
        let (mut cx, mut cy) = (vec![0.0; n], vec![0.0; n]);
        for j in 0..r {
            let (wx, wy) = split(ws.column(j).as_slice());
            let (mut ax, mut ay) = (wx.clone(), wy.clone());
            Self::scalar_solve(&l, &inv_diag, &mut ax);
            Self::scalar_solve(&l, &inv_diag, &mut ay);
            tx.iter_mut().chain(ty.iter_mut()).for_each(|t| *t = 0.0);
            dir_apply(&vx, &vy, &ax, &ay, &mut tx, &mut ty);
            dir_apply(&wx, &wy, &bx, &by, &mut tx, &mut ty);

            // c_l = b^T (d_l K) a
            for p in 0..n {
                let (gxr, gyr) = (&gx[p * n..(p + 1) * n], &gy[p * n..(p + 1) * n]);
                let (bpx, bpy, apx, apy) = (bx[p], by[p], ax[p], ay[p]);
                let (mut sx, mut sy) = (0.0, 0.0);
                for ((((gxv, gyv), (axb, ayb)), bxb), byb) in
                    gxr.iter().zip(gyr).zip(ax.iter().zip(&ay)).zip(&bx).zip(&by)
                {
                    let pair = bpx * axb + bpy * ayb + bxb * apx + byb * apy;
                    sx += gxv * pair;
                    sy += gyv * pair;
                }
                cx[p] = sx;
                cy[p] = sy;
            }
            let mut col = out.column_mut(j);
            for p in 0..n {
                let row = &kv[p * n..(p + 1) * n];
                let kx: f64 = row.iter().zip(&cx).map(|(k, c)| k * c).sum();
                let ky: f64 = row.iter().zip(&cy).map(|(k, c)| k * c).sum();
                col[2 * p] = 0.5 * (kx - tx[p]);
                col[2 * p + 1] = 0.5 * (ky - ty[p]);
            }
        }
        Ok(out)
    }
}
