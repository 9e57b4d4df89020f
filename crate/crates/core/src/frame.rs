//! Frame-bundle points and horizontal vector fields in chart coordinates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Manifold, Point};

const RANK_TOL: f64 = 1e-10;

/// A point `(y, nu)` of the frame bundle. The frame may be reduced: it
/// carries `r <= d` columns, one per driven direction.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePoint {
    pub base: Point,
    pub frame: DMatrix<f64>,
}

/// Tangent vector to the frame bundle at a [`FramePoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTangent {
    pub d_base: DVector<f64>,
    pub d_frame: DMatrix<f64>,
}

impl FramePoint {
    /// Builds a frame point, checking shapes and that the frame has full
    /// column rank.
    pub fn new(base: Point, frame: DMatrix<f64>) -> Result<Self> {
        if frame.nrows() != base.len() {
            return Err(Error::DimensionMismatch(format!(
                "frame has {} rows but the base point has {} coordinates",
                frame.nrows(),
                base.len()
            )));
        }
        if frame.ncols() == 0 || frame.ncols() > base.len() {
            return Err(Error::DegenerateFrame(format!(
                "frame rank {} outside 1..={}",
                frame.ncols(),
                base.len()
            )));
        }
        let sv = frame.singular_values();
        let hi = sv.max();
        let lo = sv.min();
        if !(hi > 0.0) || lo < RANK_TOL * hi {
            return Err(Error::DegenerateFrame(format!(
                "singular values range {lo:.3e}..{hi:.3e}"
            )));
        }
        Ok(Self { base, frame })
    }

    pub fn rank(&self) -> usize {
        self.frame.ncols()
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    /// Moves along a tangent: `u + scale * t`.
    pub fn displaced(&self, t: &FrameTangent, scale: f64) -> FramePoint {
        FramePoint {
            base: &self.base + &t.d_base * scale,
            frame: &self.frame + &t.d_frame * scale,
        }
    }
}

impl FrameTangent {
    pub fn zeros(d: usize, r: usize) -> Self {
        Self {
            d_base: DVector::zeros(d),
            d_frame: DMatrix::zeros(d, r),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.d_base.amax().max(self.d_frame.amax())
    }
}

/// Horizontal lift of `nu * w`: `dy = nu w`, `dnu_j = -Gamma(nu w, nu_j)`.
pub fn horizontal_field(model: &Manifold, u: &FramePoint, w: &DVector<f64>) -> Result<FrameTangent> {
    if w.len() != u.rank() {
        return Err(Error::DimensionMismatch(format!(
            "driver has {} components for a rank-{} frame",
            w.len(),
            u.rank()
        )));
    }
    let v = &u.frame * w;
    let d_frame = -model.connection(&u.base, &v, &u.frame)?;
    Ok(FrameTangent { d_base: v, d_frame })
}

/// The bundle projection `(y, nu) -> y`.
pub fn project(u: &FramePoint) -> Point {
    u.base.clone()
}

/// Gram matrix `nu^T g(y) nu` of the frame under the metric.
pub fn frame_gram(model: &Manifold, u: &FramePoint) -> Result<DMatrix<f64>> {
    let g = model.metric(&u.base)?;
    Ok(u.frame.transpose() * g * &u.frame)
}

/// Gram-Schmidt under the metric at the base point, in column order.
pub fn orthonormalize(model: &Manifold, u: &FramePoint) -> Result<FramePoint> {
    let (frame, _) = orthonormalize_with_factor(model, &u.base, &u.frame)?;
    Ok(FramePoint {
        base: u.base.clone(),
        frame,
    })
}

/// Returns `(Q, R)` with `frame = Q R`, `Q^T g Q = I` and `R` upper
/// triangular with positive diagonal.
pub fn orthonormalize_with_factor(
    model: &Manifold,
    base: &Point,
    frame: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let g = model.metric(base)?;
    let (d, r) = frame.shape();
    if d != base.len() {
        return Err(Error::DimensionMismatch(format!(
            "frame has {d} rows for a {}-dimensional point",
            base.len()
        )));
    }
    let inner = |a: &DVector<f64>, b: &DVector<f64>| a.dot(&(&g * b));
    let mut q = DMatrix::<f64>::zeros(d, r);
    let mut rfac = DMatrix::<f64>::zeros(r, r);
    for j in 0..r {
        let original: DVector<f64> = frame.column(j).into_owned();
        let norm0 = inner(&original, &original).sqrt();
        let mut v = original;
        // classical Gram-Schmidt, repeated once
        for _ in 0..2 {
            let mut coefs = vec![0.0; j];
            for (i, c) in coefs.iter_mut().enumerate() {
                *c = inner(&q.column(i).into_owned(), &v);
            }
            for (i, c) in coefs.iter().enumerate() {
                v -= q.column(i) * *c;
                rfac[(i, j)] += c;
            }
        }
        let norm = inner(&v, &v).sqrt();
        if !(norm > RANK_TOL * norm0) || norm0 == 0.0 {
            return Err(Error::DegenerateFrame(format!(
                "column {j} is linearly dependent on the preceding columns"
            )));
        }
        rfac[(j, j)] = norm;
        q.set_column(j, &(v / norm));
    }
    Ok((q, rfac))
}
