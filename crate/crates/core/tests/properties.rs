//! Randomised invariants of the estimation and prediction layers.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use rampc_core::estimation::{
    beta, compute_features, ellipsoid_to_box, ellipsoid_to_polytope_tight, rls_solve,
    rls_update, ConfidenceEllipsoid, NoiseModel, OmegaBounds, RegressionState,
    StructuredModel, DEFAULT_D_MAX,
};
use rampc_core::prediction::{
    interval_linear_map, interval_matrix_map, is_metzler, metzler_transform, IntervalMatrix,
    StateInterval,
};

fn scalar_model() -> StructuredModel {
    StructuredModel::new(
        DMatrix::zeros(1, 1),
        DMatrix::zeros(1, 1),
        DMatrix::identity(1, 1),
        vec![DMatrix::from_row_slice(1, 1, &[-1.0])],
        2.0,
    )
    .unwrap()
}

fn scalar_noise() -> NoiseModel {
    NoiseModel::new(
        DMatrix::from_row_slice(1, 1, &[0.0125]),
        OmegaBounds::constant(
            DVector::from_element(1, -0.05),
            DVector::from_element(1, 0.05),
        )
        .unwrap(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn interval_linear_map_contains_pointwise_images(
        entries in proptest::collection::vec(-5.0f64..5.0, 4),
        lo in proptest::collection::vec(-3.0f64..3.0, 2),
        spread in proptest::collection::vec(0.0f64..2.0, 2),
        t in 0.0f64..=1.0,
    ) {
        let m = DMatrix::from_row_slice(2, 2, &entries);
        let lower = DVector::from_row_slice(&lo);
        let upper = &lower + DVector::from_row_slice(&spread);
        let x = StateInterval::new(lower.clone(), upper.clone(), 0.0).unwrap();
        let image = interval_linear_map(&m, &x).unwrap();
        let point = &lower * (1.0 - t) + &upper * t;
        let y = &m * point;
        prop_assert!(image.contains(&y, 1e-9));
    }

    #[test]
    fn interval_matrix_map_contains_pointwise_images(
        lo_entries in proptest::collection::vec(-3.0f64..3.0, 4),
        m_spread in proptest::collection::vec(0.0f64..2.0, 4),
        x_lo in proptest::collection::vec(-3.0f64..3.0, 2),
        x_spread in proptest::collection::vec(0.0f64..2.0, 2),
        s in 0.0f64..=1.0,
        t in 0.0f64..=1.0,
    ) {
        let m_lower = DMatrix::from_row_slice(2, 2, &lo_entries);
        let m_upper = &m_lower + DMatrix::from_row_slice(2, 2, &m_spread);
        let m = IntervalMatrix::new(m_lower.clone(), m_upper.clone()).unwrap();
        let lower = DVector::from_row_slice(&x_lo);
        let upper = &lower + DVector::from_row_slice(&x_spread);
        let x = StateInterval::new(lower.clone(), upper.clone(), 0.0).unwrap();
        let image = interval_matrix_map(&m, &x).unwrap();
        let a = &m_lower * (1.0 - s) + &m_upper * s;
        let point = &lower * (1.0 - t) + &upper * t;
        let y = a * point;
        prop_assert!(image.contains(&y, 1e-9));
    }

    #[test]
    fn rls_estimate_is_permutation_invariant(
        xs in proptest::collection::vec(-2.0f64..2.0, 6),
        noise_terms in proptest::collection::vec(-0.1f64..0.1, 6),
        order in Just(()),
    ) {
        let _ = order;
        let model = scalar_model();
        let noise = scalar_noise();
        let samples: Vec<(DVector<f64>, DVector<f64>)> = xs
            .iter()
            .zip(noise_terms.iter())
            .map(|(&x, &e)| {
                (
                    DVector::from_element(1, x),
                    DVector::from_element(1, -1.5 * x + e),
                )
            })
            .collect();
        let mut fwd = RegressionState::new(1, 1.0).unwrap();
        let mut rev = RegressionState::new(1, 1.0).unwrap();
        for (x, y) in &samples {
            let f = compute_features(&model, x).unwrap();
            rls_update(&mut fwd, &f, y, &noise).unwrap();
        }
        for (x, y) in samples.iter().rev() {
            let f = compute_features(&model, x).unwrap();
            rls_update(&mut rev, &f, y, &noise).unwrap();
        }
        let a = rls_solve(&fwd).unwrap();
        let b = rls_solve(&rev).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-9);
        prop_assert!((beta(&fwd, 0.5, 2.0).unwrap() - beta(&rev, 0.5, 2.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn tight_polytope_vertices_stay_on_the_ellipsoid_boundary(
        entries in proptest::collection::vec(-1.0f64..1.0, 4),
        beta_val in 0.2f64..3.0,
    ) {
        let m = DMatrix::from_row_slice(2, 2, &entries);
        let g = &m * m.transpose() + DMatrix::identity(2, 2) * 0.2;
        let ell = ConfidenceEllipsoid {
            theta_hat: DVector::zeros(2),
            g: g.clone(),
            beta: beta_val,
            delta: 0.9,
        };
        let model = StructuredModel::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            vec![DMatrix::zeros(1, 1); 2],
            10.0,
        )
        .unwrap();
        let tight = ellipsoid_to_polytope_tight(&ell, &model, DEFAULT_D_MAX).unwrap();
        let boxed = ellipsoid_to_box(&ell, &model, DEFAULT_D_MAX).unwrap();
        for v in &tight.theta_deltas {
            // Vertex norm ||v||_G = beta * sqrt(d) for the eigenbasis box.
            let quad = (v.transpose() * &g * v)[(0, 0)].sqrt();
            prop_assert!((quad - beta_val * 2.0f64.sqrt()).abs() < 1e-6);
        }
        // The axis-aligned box circumscribes the ellipsoid, so its corners
        // can never fall strictly inside it.
        for v in &boxed.theta_deltas {
            let quad = (v.transpose() * &g * v)[(0, 0)].sqrt();
            prop_assert!(quad >= beta_val - 1e-9);
        }
    }

    #[test]
    fn metzler_transform_output_is_always_metzler(
        entries in proptest::collection::vec(-2.0f64..2.0, 4),
    ) {
        let a = DMatrix::from_row_slice(2, 2, &entries);
        if let Some((z, z_inv)) = metzler_transform(&a) {
            let m = &z_inv * &a * &z;
            prop_assert!(is_metzler(&m, 1e-5 * (1.0 + a.abs().max())));
            let id_err = (&z * &z_inv - DMatrix::identity(2, 2)).abs().max();
            prop_assert!(id_err < 1e-6);
        }
    }
}
