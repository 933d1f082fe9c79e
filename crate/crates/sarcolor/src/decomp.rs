//! Polarimetric target decompositions.
//!
//! The application layer that consumes reconstructed covariance images the
//! same way it consumes measured ones: Pauli color coding, the
//! Freeman-Durden three-component model split, the Cloude-Pottier H/ᾱ
//! eigen-decomposition of the coherency matrix, and the fixed 8-zone H/ᾱ
//! classification plane.

use crate::error::{Error, Result};
use crate::polmath::{sorted_hermitian_eigen, CovarianceMatrix};

/// Surface, double-bounce, and volume scattering powers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreemanPowers {
    pub ps: f64,
    pub pd: f64,
    pub pv: f64,
}

/// Entropy, mean alpha angle (degrees) and the sorted eigenvalue
/// probabilities of a coherency matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HAlpha {
    pub entropy: f64,
    pub mean_alpha_deg: f64,
    pub probabilities: [f64; 3],
}

/// Pauli channel powers (r, g, b) = (|Shh−Svv|²/2, 2|Shv|², |Shh+Svv|²/2).
///
/// The channels are nonnegative and sum to the span; display scaling is
/// the raster exporter's job.
pub fn pauli_rgb(c: &CovarianceMatrix) -> (f64, f64, f64) {
    let d = c.diag();
    let re13 = c.get(0, 2).re;
    let r = ((d[0] + d[2] - 2.0 * re13) / 2.0).max(0.0);
    let g = d[1];
    let b = ((d[0] + d[2] + 2.0 * re13) / 2.0).max(0.0);
    (r, g, b)
}

/// Freeman-Durden three-component decomposition.
///
/// The volume contribution is fitted from the cross-pol channel
/// (f_v = 1.5·C22 in this scattering-vector convention, total volume power
/// 8f_v/3) and subtracted; the remaining co-pol system is solved with
/// α = −1 when surface scattering dominates (Re C13 − f_v/3 ≥ 0) or β = 1
/// otherwise. Negative outcomes are clamped to zero with the deficit
/// reassigned so the three powers always sum to the span.
pub fn freeman_durden(c: &CovarianceMatrix) -> FreemanPowers {
    let span = c.span();
    if span <= 0.0 {
        return FreemanPowers {
            ps: 0.0,
            pd: 0.0,
            pv: 0.0,
        };
    }
    let d = c.diag();
    let fv = 1.5 * d[1];
    let pv = (8.0 / 3.0) * fv;

    let c11 = d[0] - fv;
    let c33 = d[2] - fv;
    let c13 = c.get(0, 2) - num_complex::Complex64::new(fv / 3.0, 0.0);

    if pv >= span || c11 <= 0.0 || c33 <= 0.0 {
        // Volume model exceeds the observed co-pol power; assign everything
        // to volume, preserving the total.
        return FreemanPowers {
            ps: 0.0,
            pd: 0.0,
            pv: span,
        };
    }

    let copol = c11 + c33;
    let (mut ps, mut pd);
    if c13.re >= 0.0 {
        // Surface dominant: fix the double-bounce pattern at α = −1.
        let fd = ((c11 * c33 - c13.norm_sqr()) / (c11 + c33 + 2.0 * c13.re)).max(0.0);
        let fs = c33 - fd;
        pd = 2.0 * fd;
        ps = copol - pd;
        if fs <= 0.0 {
            ps = 0.0;
            pd = copol;
        }
    } else {
        // Double-bounce dominant: fix the surface pattern at β = 1.
        let fs = ((c11 * c33 - c13.norm_sqr()) / (c11 + c33 - 2.0 * c13.re)).max(0.0);
        let fd = c33 - fs;
        ps = 2.0 * fs;
        pd = copol - ps;
        if fd <= 0.0 {
            pd = 0.0;
            ps = copol;
        }
    }
    if ps < 0.0 {
        pd += ps;
        ps = 0.0;
    }
    if pd < 0.0 {
        ps += pd;
        pd = 0.0;
    }
    FreemanPowers {
        ps: ps.max(0.0),
        pd: pd.max(0.0),
        pv,
    }
}

/// Cloude-Pottier eigen-decomposition of a coherency matrix.
///
/// Entropy uses base-3 logarithms (0·log 0 := 0); αᵢ is the arc-cosine of
/// the magnitude of each unit eigenvector's first component and ᾱ the
/// probability-weighted mean in degrees.
pub fn cloude_pottier(t: &CovarianceMatrix) -> Result<HAlpha> {
    let trace = t.span();
    if trace <= 0.0 {
        return Err(Error::ZeroPowerPixel);
    }
    let (values, vectors) = sorted_hermitian_eigen(&t.to_matrix());
    // Rounding can push a zero eigenvalue slightly negative.
    let lambda = [
        values[0].max(0.0),
        values[1].max(0.0),
        values[2].max(0.0),
    ];
    let total: f64 = lambda.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroPowerPixel);
    }
    let p = [lambda[0] / total, lambda[1] / total, lambda[2] / total];
    let ln3 = 3f64.ln();
    let entropy: f64 = p
        .iter()
        .map(|&pi| if pi > 0.0 { -pi * pi.ln() / ln3 } else { 0.0 })
        .sum();
    let mut mean_alpha = 0.0;
    for i in 0..3 {
        let alpha = vectors.column(i)[0].norm().clamp(0.0, 1.0).acos();
        mean_alpha += p[i] * alpha.to_degrees();
    }
    Ok(HAlpha {
        entropy: entropy.clamp(0.0, 1.0),
        mean_alpha_deg: mean_alpha,
        probabilities: p,
    })
}

/// Zone ids of the 8-zone H/ᾱ plane, ordered by increasing entropy band:
///
/// | H band        | α < low | low ≤ α < high | α ≥ high |
/// |---------------|---------|-----------------|----------|
/// | H < 0.5       | 1       | 2 (42.5°/47.5°) | 3        |
/// | 0.5 ≤ H < 0.9 | 4       | 5 (40°/50°)     | 6        |
/// | H ≥ 0.9       | 7       | 7 (40°/55°)     | 8        |
///
/// The infeasible low-α cell of the high-entropy band is merged into the
/// vegetation zone 7. Band boundaries are half-open with the boundary value
/// belonging to the higher band.
pub fn h_alpha_classify(entropy: f64, alpha_deg: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&entropy) {
        return Err(Error::InvalidInput(format!("entropy {entropy} outside [0,1]")));
    }
    if !(0.0..=90.0).contains(&alpha_deg) {
        return Err(Error::InvalidInput(format!(
            "alpha {alpha_deg} outside [0,90] degrees"
        )));
    }
    let zone = if entropy < 0.5 {
        if alpha_deg < 42.5 {
            1
        } else if alpha_deg < 47.5 {
            2
        } else {
            3
        }
    } else if entropy < 0.9 {
        if alpha_deg < 40.0 {
            4
        } else if alpha_deg < 50.0 {
            5
        } else {
            6
        }
    } else if alpha_deg < 55.0 {
        7
    } else {
        8
    };
    Ok(zone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn trihedral() -> CovarianceMatrix {
        CovarianceMatrix::new(1.0, 0.0, 1.0, c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)).unwrap()
    }

    fn dihedral() -> CovarianceMatrix {
        CovarianceMatrix::new(1.0, 0.0, 1.0, c(0.0, 0.0), c(-1.0, 0.0), c(0.0, 0.0)).unwrap()
    }

    fn volume(f: f64) -> CovarianceMatrix {
        CovarianceMatrix::new(
            f,
            2.0 * f / 3.0,
            f,
            c(0.0, 0.0),
            c(f / 3.0, 0.0),
            c(0.0, 0.0),
        )
        .unwrap()
    }

    fn random_psd(rng: &mut StdRng) -> CovarianceMatrix {
        let a = nalgebra::Matrix3::from_fn(|_, _| {
            c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        CovarianceMatrix::from_matrix(&(a * a.adjoint())).unwrap()
    }

    #[test]
    fn pauli_trihedral_is_blue() {
        let (r, g, b) = pauli_rgb(&trihedral());
        assert_relative_eq!(r, 0.0, epsilon = 1e-15);
        assert_relative_eq!(g, 0.0, epsilon = 1e-15);
        assert_relative_eq!(b, 2.0, max_relative = 1e-15);
    }

    #[test]
    fn pauli_dihedral_is_red() {
        let (r, g, b) = pauli_rgb(&dihedral());
        assert_relative_eq!(r, 2.0, max_relative = 1e-15);
        assert_relative_eq!(g, 0.0, epsilon = 1e-15);
        assert_relative_eq!(b, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pauli_channels_sum_to_span() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..500 {
            let cov = random_psd(&mut rng);
            let (r, g, b) = pauli_rgb(&cov);
            assert!(r >= 0.0 && g >= 0.0 && b >= 0.0);
            assert_relative_eq!(r + g + b, cov.span(), max_relative = 1e-12);
        }
    }

    #[test]
    fn freeman_pure_volume() {
        let f = 0.7;
        let p = freeman_durden(&volume(f));
        assert_relative_eq!(p.pv, 8.0 * f / 3.0, max_relative = 1e-12);
        assert!(p.ps.abs() < 1e-12 && p.pd.abs() < 1e-12);
    }

    #[test]
    fn freeman_pure_surface() {
        let p = freeman_durden(&trihedral());
        assert_relative_eq!(p.ps, 2.0, max_relative = 1e-12);
        assert!(p.pd.abs() < 1e-12 && p.pv.abs() < 1e-12);
    }

    #[test]
    fn freeman_pure_dihedral() {
        let p = freeman_durden(&dihedral());
        assert_relative_eq!(p.pd, 2.0, max_relative = 1e-12);
        assert!(p.ps.abs() < 1e-12 && p.pv.abs() < 1e-12);
    }

    #[test]
    fn freeman_zero_matrix() {
        let p = freeman_durden(&CovarianceMatrix::zero());
        assert_eq!((p.ps, p.pd, p.pv), (0.0, 0.0, 0.0));
    }

    #[test]
    fn freeman_powers_nonnegative_and_conserve_span() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..2000 {
            let cov = random_psd(&mut rng);
            let p = freeman_durden(&cov);
            assert!(p.ps >= 0.0 && p.pd >= 0.0 && p.pv >= 0.0);
            let total = p.ps + p.pd + p.pv;
            assert!(
                total <= cov.span() * (1.0 + 1e-6),
                "total {total} span {}",
                cov.span()
            );
            assert_relative_eq!(total, cov.span(), max_relative = 1e-6);
        }
    }

    #[test]
    fn cloude_pottier_scaled_identity_has_max_entropy() {
        for scale in [0.3, 1.0, 40.0] {
            let t = CovarianceMatrix::new(
                scale,
                scale,
                scale,
                c(0.0, 0.0),
                c(0.0, 0.0),
                c(0.0, 0.0),
            )
            .unwrap();
            let ha = cloude_pottier(&t).unwrap();
            assert_relative_eq!(ha.entropy, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cloude_pottier_rank1_surface() {
        // Coherency of a pure trihedral: eigenvector (1, 0, 0).
        let t = trihedral().to_coherency();
        let ha = cloude_pottier(&t).unwrap();
        assert!(ha.entropy.abs() < 1e-9);
        assert!(ha.mean_alpha_deg.abs() < 1e-9);
    }

    #[test]
    fn cloude_pottier_rank1_second_axis() {
        let t = CovarianceMatrix::new(0.0, 1.0, 0.0, c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0))
            .unwrap();
        let ha = cloude_pottier(&t).unwrap();
        assert!(ha.entropy.abs() < 1e-9);
        assert_relative_eq!(ha.mean_alpha_deg, 90.0, max_relative = 1e-9);
    }

    #[test]
    fn cloude_pottier_zero_trace_errors() {
        assert!(matches!(
            cloude_pottier(&CovarianceMatrix::zero()),
            Err(Error::ZeroPowerPixel)
        ));
    }

    #[test]
    fn entropy_is_scale_invariant() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100 {
            let cov = random_psd(&mut rng);
            let t = cov.to_coherency();
            let a = cloude_pottier(&t).unwrap();
            let scaled = CovarianceMatrix::from_feature(
                &t.normalize().unwrap().0,
                t.span() * rng.gen_range(0.1..50.0),
            );
            let b = cloude_pottier(&scaled).unwrap();
            assert_relative_eq!(a.entropy, b.entropy, epsilon = 1e-9);
        }
    }

    #[test]
    fn zone_lookup() {
        assert_eq!(h_alpha_classify(0.1, 10.0).unwrap(), 1);
        assert_eq!(h_alpha_classify(0.1, 45.0).unwrap(), 2);
        assert_eq!(h_alpha_classify(0.1, 60.0).unwrap(), 3);
        assert_eq!(h_alpha_classify(0.7, 10.0).unwrap(), 4);
        assert_eq!(h_alpha_classify(0.7, 45.0).unwrap(), 5);
        assert_eq!(h_alpha_classify(0.7, 60.0).unwrap(), 6);
        assert_eq!(h_alpha_classify(0.95, 45.0).unwrap(), 7);
        assert_eq!(h_alpha_classify(0.95, 10.0).unwrap(), 7); // merged cell
        assert_eq!(h_alpha_classify(0.95, 60.0).unwrap(), 8);
    }

    #[test]
    fn zone_boundaries_belong_to_higher_band() {
        assert_eq!(h_alpha_classify(0.5, 10.0).unwrap(), 4);
        assert_eq!(h_alpha_classify(0.9, 45.0).unwrap(), 7);
        assert_eq!(h_alpha_classify(0.49999, 10.0).unwrap(), 1);
    }

    #[test]
    fn zone_rejects_out_of_range() {
        assert!(h_alpha_classify(-0.1, 10.0).is_err());
        assert!(h_alpha_classify(0.5, 95.0).is_err());
    }
}
