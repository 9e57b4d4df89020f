//! Development of Euclidean driving paths onto the manifold.
//!
//! The driver is piecewise linear, so the Stratonovich equation
//! `dU = H_i(U) o dX^i` becomes an ODE on each segment. Each segment is
//! split into `substeps` pieces integrated with Heun's predictor-corrector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{horizontal_field, project, FramePoint};
use crate::geometry::{Manifold, Point};

pub const DEFAULT_SUBSTEPS: usize = 4;
pub const DEFAULT_STEPS: usize = 30;

/// Discretized driver: row `t` holds the increment over step `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingPath {
    pub increments: DMatrix<f64>,
    pub total_time: f64,
}

impl DrivingPath {
    pub fn new(increments: DMatrix<f64>, total_time: f64) -> Result<Self> {
        if increments.nrows() == 0 {
            return Err(Error::InvalidData("driving path needs at least one step".into()));
        }
        if !(total_time > 0.0 && total_time.is_finite()) {
            return Err(Error::InvalidData(format!("total time must be positive, got {total_time}")));
        }
        if increments.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("non-finite increment".into()));
        }
        Ok(Self {
            increments,
            total_time,
        })
    }

    /// Straight line from the origin to `target` in `steps` equal pieces.
    pub fn straight(target: &DVector<f64>, steps: usize, total_time: f64) -> Result<Self> {
        let inc = DMatrix::from_fn(steps, target.len(), |_, j| target[j] / steps as f64);
        Self::new(inc, total_time)
    }

    pub fn steps(&self) -> usize {
        self.increments.nrows()
    }

    pub fn width(&self) -> usize {
        self.increments.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.total_time / self.steps() as f64
    }

    /// Reverses the path and negates its increments.
    pub fn reversed(&self) -> Self {
        let n = self.steps();
        Self {
            increments: DMatrix::from_fn(n, self.width(), |t, j| -self.increments[(n - 1 - t, j)]),
            total_time: self.total_time,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DevelopedPath {
    pub states: Vec<FramePoint>,
    pub base_points: Vec<Point>,
}

impl DevelopedPath {
    pub fn endpoint(&self) -> &FramePoint {
        self.states.last().expect("developed paths are never empty")
    }
}

/// Integrates one increment `dx` (over one step of the driver).
pub fn develop_step(model: &Manifold, u: &FramePoint, dx: &DVector<f64>, substeps: usize) -> Result<FramePoint> {
    let sub = dx / substeps as f64;
    let mut cur = u.clone();
    for _ in 0..substeps {
        let k1 = horizontal_field(model, &cur, &sub)?;
        let pred = cur.displaced(&k1, 1.0);
        let k2 = horizontal_field(model, &pred, &sub)?;
        cur = FramePoint {
            base: &cur.base + (&k1.d_base + &k2.d_base) * 0.5,
            frame: &cur.frame + (&k1.d_frame + &k2.d_frame) * 0.5,
        };
    }
    Ok(cur)
}

fn check_shapes(u0: &FramePoint, path: &DrivingPath, substeps: usize) -> Result<()> {
    if u0.rank() != path.width() {
        return Err(Error::DimensionMismatch(format!(
            "frame rank {} does not match driver width {}",
            u0.rank(),
            path.width()
        )));
    }
    if substeps == 0 {
        return Err(Error::InvalidConfig("substeps must be positive".into()));
    }
    Ok(())
}

pub fn develop(model: &Manifold, u0: &FramePoint, path: &DrivingPath, substeps: usize) -> Result<DevelopedPath> {
    check_shapes(u0, path, substeps)?;
    let mut states = Vec::with_capacity(path.steps() + 1);
    states.push(u0.clone());
    for t in 0..path.steps() {
        let dx = path.increments.row(t).transpose();
        let next = develop_step(model, &states[t], &dx, substeps).map_err(|e| e.at_step(t))?;
        states.push(next);
    }
    let base_points = states.iter().map(project).collect();
    Ok(DevelopedPath { states, base_points })
}

/// Integrates rows `start..` of `increments` beginning at `u`, returning the
/// final frame point. Used to re-develop path suffixes.
pub fn develop_from(
    model: &Manifold,
    u: &FramePoint,
    increments: &DMatrix<f64>,
    start: usize,
    substeps: usize,
) -> Result<FramePoint> {
    let mut cur = u.clone();
    for t in start..increments.nrows() {
        let dx = increments.row(t).transpose();
        cur = develop_step(model, &cur, &dx, substeps).map_err(|e| e.at_step(t))?;
    }
    Ok(cur)
}

/// Ambient position of the developed endpoint.
pub fn develop_endpoint(model: &Manifold, u0: &FramePoint, path: &DrivingPath, substeps: usize) -> Result<DVector<f64>> {
    check_shapes(u0, path, substeps)?;
    let end = develop_from(model, u0, &path.increments, 0, substeps)?;
    model.embed(&project(&end))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceEstimate {
    /// Estimated order, `log2(e1 / e2)`; infinite when the scheme is exact.
    pub order: f64,
    /// The integrator reproduced the same endpoint at every resolution.
    pub exact: bool,
    /// Endpoint differences between successive resolutions `(1,2)` and `(2,4)`.
    pub differences: [f64; 2],
}

/// Empirical convergence order from developments at 1, 2 and 4 substeps.
pub fn convergence_order(model: &Manifold, u0: &FramePoint, path: &DrivingPath) -> Result<ConvergenceEstimate> {
    let ends = [1, 2, 4]
        .iter()
        .map(|&s| {
            let e = develop_from(model, u0, &path.increments, 0, s)?;
            Ok(state_vector(&e))
        })
        .collect::<Result<Vec<_>>>()?;
    let e1 = (&ends[0] - &ends[1]).norm();
    let e2 = (&ends[1] - &ends[2]).norm();
    let scale = ends[2].norm().max(1.0);
    let exact = e1 <= 1e-13 * scale && e2 <= 1e-13 * scale;
    let order = if exact { f64::INFINITY } else { (e1 / e2).log2() };
    Ok(ConvergenceEstimate {
        order,
        exact,
        differences: [e1, e2],
    })
}

fn state_vector(u: &FramePoint) -> DVector<f64> {
    let mut v = u.base.as_slice().to_vec();
    v.extend_from_slice(u.frame.as_slice());
    DVector::from_vec(v)
}
