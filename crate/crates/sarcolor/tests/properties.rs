//! Property tests for the library-wide invariants.

use nalgebra::Matrix3;
use num_complex::Complex64;
use proptest::prelude::*;

use sarcolor::evalmetrics::{bartlett, coi, mae};
use sarcolor::polmath::{psd_check, psd_correct, CovarianceMatrix, PolFeature, PSD_TOLERANCE};
use sarcolor::quantizer::QuantizerTable;

fn complex_strategy() -> impl Strategy<Value = Complex64> {
    (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(re, im)| Complex64::new(re, im))
}

/// Random Hermitian PSD matrix as a Gram matrix A·Aᴴ.
fn psd_strategy() -> impl Strategy<Value = CovarianceMatrix> {
    proptest::collection::vec(complex_strategy(), 9).prop_map(|v| {
        let a = Matrix3::from_fn(|i, j| v[i * 3 + j]);
        CovarianceMatrix::from_matrix(&(a * a.adjoint())).unwrap()
    })
}

/// Random feature: simplex-uniform deltas, amplitudes in [0,1], free phases.
fn feature_strategy() -> impl Strategy<Value = PolFeature> {
    (
        (1e-9f64..1.0, 1e-9f64..1.0, 1e-9f64..1.0),
        proptest::collection::vec((0.0f64..1.0, -std::f64::consts::PI..std::f64::consts::PI), 3),
    )
        .prop_map(|((e1, e2, e3), polar)| {
            let (l1, l2, l3) = (-e1.ln(), -e2.ln(), -e3.ln());
            let s = l1 + l2 + l3;
            let rho: Vec<Complex64> = polar
                .into_iter()
                .map(|(r, phi)| Complex64::from_polar(r, phi))
                .collect();
            PolFeature {
                delta: [l1 / s, l2 / s, l3 / s],
                rho: [rho[0], rho[1], rho[2]],
            }
        })
}

proptest! {
    #[test]
    fn normalize_reconstruct_roundtrip(cov in psd_strategy()) {
        prop_assume!(cov.span() > 1e-9);
        let (feat, power) = cov.normalize().unwrap();
        feat.validate().unwrap();
        let back = CovarianceMatrix::from_feature(&feat, power);
        prop_assert!(cov.rel_frobenius(&back) <= 1e-12);
    }

    #[test]
    fn normalized_correlations_bounded(cov in psd_strategy()) {
        prop_assume!(cov.span() > 1e-9);
        let (feat, _) = cov.normalize().unwrap();
        for r in feat.rho {
            prop_assert!(r.norm() <= 1.0);
        }
        prop_assert!(psd_check(&feat, 1e-9).satisfied);
    }

    #[test]
    fn psd_correct_is_idempotent_and_valid(feat in feature_strategy()) {
        let (once, report) = psd_correct(&feat);
        prop_assert!(report.satisfied);
        prop_assert!(psd_check(&once, PSD_TOLERANCE).satisfied);
        // rho13 is never modified.
        prop_assert_eq!(once.rho[0], feat.rho[0]);
        let (twice, second) = psd_correct(&once);
        prop_assert_eq!(once, twice);
        prop_assert_eq!(second.eta, 1.0);
        prop_assert_eq!(second.delta_phi, 0.0);
        // Eigenvalue oracle on the reconstruction.
        let min_eig = CovarianceMatrix::from_feature(&once, 1.0).min_eigenvalue();
        prop_assert!(min_eig >= -1e-9);
    }

    #[test]
    fn quantizer_encode_monotone_and_roundtrip_bounded(
        samples in proptest::collection::vec(0.0f64..1.0, 64..300),
        probe in proptest::collection::vec(-0.5f64..1.5, 16),
    ) {
        let table = QuantizerTable::fit(&samples, 8, (0.0, 1.0)).unwrap();
        for w in table.edges.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
        let mut sorted = probe.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in sorted.windows(2) {
            prop_assert!(table.encode(pair[0]) <= table.encode(pair[1]));
        }
        for &v in &probe {
            let clamped = v.clamp(0.0, 1.0);
            let bin = table.encode(clamped);
            let width = table.edges[bin + 1] - table.edges[bin];
            prop_assert!((table.roundtrip(clamped) - clamped).abs() <= width);
        }
    }

    #[test]
    fn mae_metric_properties(
        a in proptest::collection::vec(-10.0f64..10.0, 12),
        b in proptest::collection::vec(-10.0f64..10.0, 12),
        c in proptest::collection::vec(-10.0f64..10.0, 12),
    ) {
        let ab = mae(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - mae(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(ab <= mae(&a, &c).unwrap() + mae(&c, &b).unwrap() + 1e-9);
    }

    #[test]
    fn coi_magnitude_bounded(
        a in proptest::collection::vec(complex_strategy(), 10),
        b in proptest::collection::vec(complex_strategy(), 10),
    ) {
        prop_assume!(a.iter().any(|z| z.norm() > 1e-9));
        prop_assume!(b.iter().any(|z| z.norm() > 1e-9));
        prop_assert!(coi(&a, &b).unwrap().norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn bartlett_nonnegative_and_identity(x in psd_strategy(), y in psd_strategy()) {
        prop_assume!(x.span() > 1e-6 && y.span() > 1e-6);
        let d = bartlett(&x, &y).unwrap();
        prop_assert!(d >= -1e-9);
        let self_d = bartlett(&x, &x).unwrap();
        prop_assert!(self_d.abs() <= 1e-12);
        if d.abs() <= 1e-12 {
            // Zero distance only for (numerically) equal matrices.
            prop_assert!(x.rel_frobenius(&y) <= 1e-5);
        }
    }
}
