//! Property tests for the algebraic invariants.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rspic::*;

proptest! {
    #[test]
    fn lambda_inverts_the_gap(phi in -5.0f64..5.0, psi in 0.01f64..5.0) {
        prop_assume!((psi - phi).abs() > 1e-6);
        let lambda = lambda_of(phi, psi).unwrap();
        prop_assert!((lambda * (psi - phi) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn log_mean_exp_shift_invariance(
        values in prop::collection::vec(-50.0f64..50.0, 1..64),
        shift in -100.0f64..100.0,
    ) {
        let base = log_mean_exp(&values);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        prop_assert!((log_mean_exp(&shifted) - (base + shift)).abs() <= 1e-9);
    }

    #[test]
    fn log_mean_exp_bounded_by_extremes(values in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let lme = log_mean_exp(&values);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lme >= min - 1e-12 && lme <= max + 1e-12);
    }

    #[test]
    fn psi_invariant_under_joint_scaling(c in 0.1f64..10.0, b in 0.2f64..3.0) {
        let model = DiffusionModel::linear(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, c * b),
            DMatrix::from_element(1, 1, 1.0),
        ).unwrap();
        let psi = compute_psi(
            &model,
            &DMatrix::from_element(1, 1, c * c),
            &[DVector::from_element(1, 1.0)],
            1e-8,
        ).unwrap();
        prop_assert!((psi - b * b).abs() <= 1e-8 * b * b.max(1.0));
    }

    #[test]
    fn control_scales_linearly_with_gradient(g in -10.0f64..10.0, c in -4.0f64..4.0) {
        let model = DiffusionModel::scalar_ou();
        let r = DMatrix::from_element(1, 1, 1.7);
        let x = DVector::from_element(1, 0.3);
        let u = control_from_gradient(&model, &r, &x, &DVector::from_element(1, g)).unwrap();
        let uc = control_from_gradient(&model, &r, &x, &DVector::from_element(1, c * g)).unwrap();
        prop_assert!((uc[0] - c * u[0]).abs() <= 1e-12 * (1.0 + u[0].abs() * c.abs()));
    }

    #[test]
    fn expansion_is_exact_on_constants(c in -20.0f64..20.0, phi in -0.5f64..0.5, k in 2usize..32) {
        let samples = vec![c; k];
        let (exact, expansion) = risk_expansion_check(&samples, phi);
        prop_assert!((exact - c).abs() <= 1e-9 * (1.0 + c.abs()));
        prop_assert!((expansion - c).abs() <= 1e-9 * (1.0 + c.abs()));
    }
}
