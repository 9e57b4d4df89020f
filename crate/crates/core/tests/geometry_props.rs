use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stodev::experiments::fd_christoffel;
use stodev::geometry::{Manifold, Tensor3};

/// Planar landmark configuration with points at least ~0.2 apart.
fn landmark_config(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-0.3f64..0.3, 2 * n).prop_map(move |jitter| {
        DVector::from_fn(2 * n, |i, _| {
            let angle = (i / 2) as f64 * std::f64::consts::TAU / n as f64;
            let base = if i % 2 == 0 { angle.cos() } else { angle.sin() };
            base + jitter[i]
        })
    })
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn landmark_christoffel_matches_finite_differences(p in landmark_config(3), sigma in 0.4f64..1.2) {
        let model = Manifold::landmarks(3, sigma).unwrap();
        let analytic = model.christoffel(&p).unwrap();
        let fd = fd_christoffel(&model, &p, 1e-5).unwrap();
        prop_assert!(analytic.max_abs_diff(&fd) < 1e-4, "deviation {}", analytic.max_abs_diff(&fd));
    }

    #[test]
    fn metric_inverts_cometric(p in landmark_config(4), sigma in 0.3f64..1.0) {
        let model = Manifold::landmarks(4, sigma).unwrap();
        let g = model.metric(&p).unwrap();
        let g_inv = model.cometric(&p).unwrap();
        let err = spectral_norm(&(&g * &g_inv - DMatrix::identity(8, 8)));
        prop_assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn christoffel_symbols_are_symmetric(p in landmark_config(3)) {
        let gamma = Manifold::landmarks(3, 0.6).unwrap().christoffel(&p).unwrap();
        for k in 0..6 {
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert!((gamma[(k, i, j)] - gamma[(k, j, i)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sphere_christoffel_closed_form(theta in 0.05f64..3.09, phi in -3.0f64..3.0) {
        let gamma = Manifold::sphere2().christoffel(&DVector::from_vec(vec![theta, phi])).unwrap();
        let mut exact = Tensor3::zeros(2);
        exact[(0, 1, 1)] = -theta.sin() * theta.cos();
        exact[(1, 0, 1)] = theta.cos() / theta.sin();
        exact[(1, 1, 0)] = theta.cos() / theta.sin();
        prop_assert!(gamma.max_abs_diff(&exact) < 1e-10);
    }

    #[test]
    fn sphere_metric_closed_form(theta in 0.05f64..3.09, phi in -3.0f64..3.0) {
        let g = Manifold::sphere2().metric(&DVector::from_vec(vec![theta, phi])).unwrap();
        let exact = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, theta.sin().powi(2)]);
        prop_assert!((g - exact).amax() < 1e-12);
    }

    #[test]
    fn sphere_embedding_is_unit(theta in 0.05f64..3.09, phi in -3.0f64..3.0) {
        let e = Manifold::sphere2().embed(&DVector::from_vec(vec![theta, phi])).unwrap();
        prop_assert!((e.norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn flat_christoffel_vanishes() {
    let model = Manifold::flat(4).unwrap();
    let p = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1]);
    assert_eq!(model.christoffel(&p).unwrap().max_abs(), 0.0);
}
