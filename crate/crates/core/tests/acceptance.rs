//! End-to-end acceptance suite. Every criterion prints one line
//! `[acceptance] <id> PASS|FAIL ...` and the test fails if any criterion does.
//! Criteria run sequentially so the reported runtimes are not inflated by
//! each other.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stodev::development::{convergence_order, develop, develop_endpoint, DrivingPath};
use stodev::experiments::{
    cc_fixture, fd_christoffel, fit_study, flat_ols, run_frame_study, run_recovery_study, simulate_study_dataset,
    StudyConfig, StudyKind,
};
use stodev::frame::{frame_gram, orthonormalize_with_factor, FramePoint};
use stodev::geometry::{Manifold, Tensor3};
use stodev::inference::{
    fit, initial_parameters, laplace_log_likelihood, EstimateFlags, FitConfig, HessianMode, InitOptions,
};
use stodev::io::{write_json, ThetaFile};
use stodev::process::ModelParameters;

struct Outcome {
    passed: bool,
    detail: String,
}

fn run(id: &str, budget: Duration, f: impl FnOnce() -> Outcome, failures: &mut Vec<String>) {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let passed = out.passed && in_time;
    println!(
        "[acceptance] {id} {} | {} | runtime {:.1}s (budget {:.0}s)",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    if !passed {
        failures.push(id.to_string());
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn flat_study(n: usize, seed: u64) -> StudyConfig {
    StudyConfig {
        study: StudyKind::Custom,
        n,
        seed,
        manifold: Some(Manifold::flat(3).unwrap().config()),
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
            steps: 6,
            substeps: 2,
            hessian: HessianMode::GaussNewton,
            ..FitConfig::default()
        },
        ..StudyConfig::default()
    }
}

/// Exact marginal log-density of the flat model with fixed covariates:
/// `y_i ~ N(y0 + U (beta T + W~ x_i), T U U^T + tau^2 I)`.
fn flat_marginal(theta: &ModelParameters, x: &DMatrix<f64>, y: &DMatrix<f64>, total: f64) -> f64 {
    let k = y.ncols();
    let cov = &theta.frame * theta.frame.transpose() * total + DMatrix::identity(k, k) * theta.tau.powi(2);
    let chol = cov.cholesky().unwrap();
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    (0..y.nrows())
        .map(|i| {
            let xi = x.row(i).transpose();
            let mean = &theta.y0 + &theta.frame * (&theta.beta * total + &theta.w_tilde * xi);
            let r = y.row(i).transpose() - mean;
            -0.5 * r.dot(&chol.solve(&r)) - 0.5 * log_det - 0.5 * k as f64 * (2.0 * PI).ln()
        })
        .sum()
}

fn criterion_flat() -> Outcome {
    let config = flat_study(40, 11);
    let sim = simulate_study_dataset(&config, config.n, config.seed).unwrap();
    let result = fit_study(&config, &sim).unwrap();
    let (y0, w) = flat_ols(&sim.data, &sim.truth.frame);
    let theta = &result.theta_hat;
    let param_dev = (&theta.y0 - y0)
        .amax()
        .max((&theta.w_tilde - w).amax())
        .max(theta.beta.amax());
    let cfg = FitConfig {
        estimate: config.estimate_flags(),
        ..config.fit.clone()
    };
    let ll = laplace_log_likelihood(&sim.model, theta, &sim.data, &cfg).unwrap();
    let ll_dev = (ll - flat_marginal(theta, &sim.data.x, &sim.data.y, cfg.total_time)).abs();
    Outcome {
        passed: param_dev < 1e-4 && ll_dev < 1e-6,
        detail: format!("flat fit vs OLS max dev {param_dev:.2e} (tol 1e-4); Laplace vs Gaussian marginal {ll_dev:.2e} (tol 1e-6)"),
    }
}

fn criterion_geometry() -> Outcome {
    let sphere = Manifold::sphere2();
    let mut sphere_dev = 0.0_f64;
    for i in 0..50 {
        let theta = 0.05 + 3.0 * i as f64 / 49.0;
        let gamma = sphere.christoffel(&DVector::from_vec(vec![theta, 0.4 * i as f64])).unwrap();
        let mut exact = Tensor3::zeros(2);
        exact[(0, 1, 1)] = -theta.sin() * theta.cos();
        exact[(1, 0, 1)] = theta.cos() / theta.sin();
        exact[(1, 1, 0)] = theta.cos() / theta.sin();
        sphere_dev = sphere_dev.max(gamma.max_abs_diff(&exact));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut landmark_dev = 0.0_f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=5);
        let model = Manifold::landmarks(n, rng.gen_range(0.3..1.0)).unwrap();
        let p = DVector::from_fn(2 * n, |i, _| {
            let a = (i / 2) as f64 * 2.0 * PI / n as f64;
            (if i % 2 == 0 { a.cos() } else { a.sin() }) + rng.gen_range(-0.25..0.25)
        });
        let analytic = model.christoffel(&p).unwrap();
        landmark_dev = landmark_dev.max(analytic.max_abs_diff(&fd_christoffel(&model, &p, 1e-5).unwrap()));
    }
    Outcome {
        passed: sphere_dev < 1e-10 && landmark_dev < 1e-4,
        detail: format!(
            "sphere Christoffel dev {sphere_dev:.2e} (tol 1e-10); landmark FD dev over 100 configs {landmark_dev:.2e} (tol 1e-4)"
        ),
    }
}

fn criterion_development() -> Outcome {
    let sphere = Manifold::sphere2();
    let u0 = FramePoint::new(DVector::from_vec(vec![PI / 2.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
    let len = 1.2;
    // 50 steps x 4 substeps = 200 integration steps
    let path = DrivingPath::straight(&DVector::from_vec(vec![0.6 * len, 0.8 * len]), 50, 1.0).unwrap();
    let end = develop_endpoint(&sphere, &u0, &path, 4).unwrap();
    let exact = DVector::from_vec(vec![len.cos(), 0.8 * len.sin(), -0.6 * len.sin()]);
    let geodesic_err = (end - exact).norm();

    let theta = 1.1_f64;
    let u1 = FramePoint::new(
        DVector::from_vec(vec![theta, 0.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 / theta.sin()]),
    )
    .unwrap();
    let wavy = DMatrix::from_fn(8, 2, |t, j| 0.12 * ((t as f64 * 0.7 + j as f64).sin() + 0.4));
    let order = convergence_order(&sphere, &u1, &DrivingPath::new(wavy, 1.0).unwrap())
        .unwrap()
        .order;

    let model = Manifold::landmarks(3, 0.7).unwrap();
    let base = DVector::from_vec(vec![-0.8, 0.0, 0.0, 0.2, 0.8, -0.1]);
    let raw = DMatrix::from_fn(6, 2, |i, j| if i % 2 == j { 1.0 } else { 0.2 * (i as f64 - 2.5) });
    let (frame, _) = orthonormalize_with_factor(&model, &base, &raw).unwrap();
    let start = FramePoint::new(base, frame).unwrap();
    let inc = DMatrix::from_fn(100, 2, |t, j| 0.01 * ((t as f64 * 0.1 + j as f64).sin() + 0.5));
    let dev = develop(&model, &start, &DrivingPath::new(inc, 1.0).unwrap(), 4).unwrap();
    let g0 = frame_gram(&model, &start).unwrap();
    let drift = dev
        .states
        .iter()
        .map(|s| (frame_gram(&model, s).unwrap() - &g0).amax())
        .fold(0.0, f64::max);
    Outcome {
        passed: geodesic_err < 1e-4 && (1.7..=2.3).contains(&order) && drift < 1e-4,
        detail: format!(
            "great-circle endpoint err {geodesic_err:.2e} (tol 1e-4); integrator order {order:.3} (range [1.7, 2.3]); isometry drift {drift:.2e} (tol 1e-4)"
        ),
    }
}

fn criterion_curvature() -> Outcome {
    // the same Euclidean endpoint (0.6, 0.5) reached along opposite L-shapes
    let l_shape = |first: usize| {
        DrivingPath::new(
            DMatrix::from_fn(40, 2, |t, j| {
                let leg = if t < 20 { first } else { 1 - first };
                if j == leg {
                    [0.6, 0.5][j] / 20.0
                } else {
                    0.0
                }
            }),
            1.0,
        )
        .unwrap()
    };
    let (p, q) = (l_shape(0), l_shape(1));
    assert!((p.increments.row_sum() - q.increments.row_sum()).amax() < 1e-15);

    let sphere = Manifold::sphere2();
    let us = FramePoint::new(DVector::from_vec(vec![PI / 2.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
    let gap_sphere = (develop_endpoint(&sphere, &us, &p, 4).unwrap() - develop_endpoint(&sphere, &us, &q, 4).unwrap()).norm();

    let model = Manifold::landmarks(2, 0.7).unwrap();
    let base = DVector::from_vec(vec![-0.5, 0.0, 0.5, 0.1]);
    let raw = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.3, 0.0, 0.0, 0.4]);
    let (frame, _) = orthonormalize_with_factor(&model, &base, &raw).unwrap();
    let ul = FramePoint::new(base, frame).unwrap();
    let gap_landmarks = (develop_endpoint(&model, &ul, &p, 4).unwrap() - develop_endpoint(&model, &ul, &q, 4).unwrap()).norm();
    Outcome {
        passed: gap_sphere > 1e-3 && gap_landmarks > 1e-3,
        detail: format!("endpoint gap sphere {gap_sphere:.3e}, 2 landmarks {gap_landmarks:.3e} (need > 1e-3)"),
    }
}

fn w_truth() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.1, 0.2])
}

fn criterion_recovery_n100() -> Outcome {
    let config = StudyConfig {
        n: 100,
        ..StudyConfig::default()
    };
    let sim = simulate_study_dataset(&config, config.n, config.seed).unwrap();
    match fit_study(&config, &sim) {
        Ok(f) => {
            let err = (&f.theta_hat.w_tilde - w_truth()).abs();
            let rows: Vec<String> = f
                .theta_hat
                .w_tilde
                .row_iter()
                .map(|r| format!("[{:.4}, {:.4}]", r[0], r[1]))
                .collect();
            Outcome {
                passed: err.max() <= 0.05,
                detail: format!(
                    "circle8 n=100 W_hat = [{}], max entry error {:.4} (tol 0.05), tau_hat {:.4}, converged {}",
                    rows.join(", "),
                    err.max(),
                    f.theta_hat.tau,
                    f.diagnostics.converged
                ),
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: format!("fit failed: {e}"),
        },
    }
}

fn criterion_coverage() -> Outcome {
    let config = StudyConfig {
        n: 20,
        replicates: Some(20),
        sizes: vec![],
        ..StudyConfig::default()
    };
    match run_recovery_study(&config) {
        Ok(report) => {
            let bands: Vec<String> = report
                .summary
                .iter()
                .map(|e| {
                    format!(
                        "W[{}{}]={} in [{:.3}, {:.3}] {}",
                        e.row,
                        e.col,
                        e.truth,
                        e.q05,
                        e.q95,
                        if e.covered { "yes" } else { "no" }
                    )
                })
                .collect();
            Outcome {
                passed: report.summary.len() == 4 && report.summary.iter().all(|e| e.covered),
                detail: format!(
                    "20 replicates at n=20 ({} failed): {}",
                    report.failures,
                    bands.join("; ")
                ),
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: format!("study failed: {e}"),
        },
    }
}

fn frame_angle(config: &StudyConfig) -> Result<f64, String> {
    let report = run_frame_study(config).map_err(|e| e.to_string())?;
    report.max_angle_deg.ok_or_else(|| "no successful replicate".to_string())
}

fn criterion_frame() -> Outcome {
    let quiet = StudyConfig {
        study: StudyKind::Frame3,
        n: 20,
        tau: Some(1e-3),
        brownian: false,
        ..StudyConfig::default()
    };
    let nominal = StudyConfig {
        study: StudyKind::Frame3,
        n: 20,
        ..StudyConfig::default()
    };
    match (frame_angle(&quiet), frame_angle(&nominal)) {
        (Ok(a), Ok(b)) => Outcome {
            passed: a <= 2.0 && b <= 15.0,
            detail: format!("max angle to vertical: near-zero noise {a:.3} deg (tol 2), nominal noise (tau 0.1) {b:.3} deg (tol 15)"),
        },
        (a, b) => Outcome {
            passed: false,
            detail: format!("frame study failed: {a:?} / {b:?}"),
        },
    }
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let recovery = StudyConfig {
        n: 8,
        seed: 77,
        replicates: Some(3),
        sizes: vec![8, 12],
        fit: FitConfig {
            steps: 8,
            substeps: 2,
            hessian: HessianMode::GaussNewton,
            ..FitConfig::default()
        },
        ..StudyConfig::default()
    };
    let frame = StudyConfig {
        study: StudyKind::Frame3,
        replicates: Some(2),
        ..recovery.clone()
    };
    let mut identical = true;
    for run in 0..2 {
        write_json(&dir.path().join(format!("recovery{run}.json")), &run_recovery_study(&recovery).unwrap()).unwrap();
        write_json(&dir.path().join(format!("frame{run}.json")), &run_frame_study(&frame).unwrap()).unwrap();
    }
    for name in ["recovery", "frame"] {
        let a = std::fs::read(dir.path().join(format!("{name}0.json"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("{name}1.json"))).unwrap();
        identical &= a == b;
    }
    Outcome {
        passed: identical,
        detail: format!("recovery and frame reports byte-identical across reruns: {identical}"),
    }
}

fn cc_smoke() -> Outcome {
    let sim = cc_fixture(20, 2016).unwrap();
    let mut init = initial_parameters(&sim.model, &sim.data, &InitOptions::default()).unwrap();
    init.tau = 0.1;
    let cfg = FitConfig {
        steps: 10,
        substeps: 2,
        hessian: HessianMode::GaussNewton,
        estimate: EstimateFlags {
            y0: false,
            frame: true,
            w_tilde: true,
            beta: false,
            tau: false,
        },
        ..FitConfig::default()
    };
    match fit(&sim.model, &sim.data, &cfg, Some(&init)) {
        Ok(f) => {
            let theta = &f.theta_hat;
            let mut sq = 0.0;
            let mut worst = 0.0_f64;
            for (i, z) in f.inner_modes.blocks().into_iter().enumerate() {
                let end = develop_endpoint(&sim.model, &theta.frame_point(), &DrivingPath::new(z, 1.0).unwrap(), 2).unwrap();
                let r = sim.data.response(i) - end;
                sq += r.norm_squared();
                worst = worst.max(r.amax());
            }
            let rms = (sq / (sim.data.len() * sim.data.ambient_dim()) as f64).sqrt();
            let finite = f.log_likelihood.is_finite()
                && f.diagnostics.hessian_log_det.is_finite()
                && f.diagnostics.inner_grad_norms.iter().all(|g| g.is_finite());
            Outcome {
                passed: finite && rms < 0.2 && worst < 0.6,
                detail: format!(
                    "CC fixture fit: W_hat {:.5}, diagnostics finite {finite}, residual rms {rms:.4} (< 0.2), max {worst:.4} (< 0.6)",
                    theta.w_tilde[(0, 0)]
                ),
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: format!("fit failed: {e}"),
        },
    }
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    run("criterion-1-flat-reduction", secs(10), criterion_flat, &mut failures);
    run("criterion-2-geometry-oracle", secs(30), criterion_geometry, &mut failures);
    run("criterion-3-development-oracle", secs(10), criterion_development, &mut failures);
    run("criterion-4-curvature-effect", secs(5), criterion_curvature, &mut failures);
    run("criterion-5-recovery-n100", secs(15 * 60), criterion_recovery_n100, &mut failures);
    run("criterion-6-coverage-20-replicates", secs(30 * 60), criterion_coverage, &mut failures);
    run("criterion-7-frame-study", secs(10 * 60), criterion_frame, &mut failures);
    run("criterion-8-determinism", secs(10 * 60), criterion_determinism, &mut failures);
    run("cc-fixture-smoke", secs(10 * 60), cc_smoke, &mut failures);
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
