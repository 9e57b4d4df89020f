//! Small dense quasi-Newton minimizer with finite-difference gradients.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop when the infinity norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Central-difference step.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-7,
            fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

pub fn central_gradient<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// BFGS with Armijo backtracking. Non-finite objective values are treated
/// as infeasible and shrink the step.
pub fn minimize_bfgs<F: Fn(&DVector<f64>) -> f64>(f: F, x0: &DVector<f64>, opts: &BfgsOptions) -> BfgsResult {
    let n = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x);
    let mut g = central_gradient(&f, &x, opts.fd_step);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut first = true;

    while iterations < opts.max_iters && g.amax() > opts.grad_tol && fx.is_finite() {
        iterations += 1;
        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        if first {
            // keep the first, unscaled step modest
            let scale = 1.0 / dir.amax().max(1.0);
            dir *= scale;
            slope *= scale;
            first = false;
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * alpha;
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * alpha * slope {
                accepted = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            break;
        };
        let gn = central_gradient(&f, &xn, opts.fd_step);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy^T + hy s^T) + (rho^2 yHy + rho) s s^T
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&s * hy.transpose() + &hy * s.transpose()) * rho;
        }
        let small_change = (fx - fnew).abs() <= 1e-15 * fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if small_change && s.amax() <= 1e-12 * x.amax().max(1.0) {
            break;
        }
    }

    BfgsResult {
        grad_norm: g.amax(),
        x,
        value: fx,
        iterations,
    }
}
