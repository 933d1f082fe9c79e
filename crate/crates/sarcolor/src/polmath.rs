//! Polarimetric covariance algebra.
//!
//! A reciprocal full-pol measurement is a scattering vector
//! k = (Shh, √2·Shv, Svv); multilooked data is summarized by the 3×3
//! Hermitian covariance C = ⟨k·kᴴ⟩. This module provides the exact algebra
//! on that representation: construction from looks, the normalized
//! six-parameter feature space (δ1, δ2, δ3, ρ13, ρ23, ρ12) and its inverse,
//! power recovery from a single intensity channel, and a closed-form
//! two-step repair that restores positive semi-definiteness by shrinking
//! the cross-pol correlation amplitudes and shifting their phases. ρ13 is
//! never touched by the repair: the co-pol correlation carries the most
//! information.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Margin tolerance used by [`psd_correct`] when deciding whether an input
/// already satisfies the determinant constraint.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Below this δ the per-channel power division is numerically meaningless.
pub const DELTA_FLOOR: f64 = 1e-6;

/// Which polarization channel an intensity image was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Hh,
    Hv,
    Vv,
}

impl Channel {
    /// Index of the covariance diagonal entry carrying this channel's
    /// intensity (HV intensity is the full 2⟨|Shv|²⟩ stored in C22).
    pub fn diag_index(self) -> usize {
        match self {
            Channel::Hh => 0,
            Channel::Hv => 1,
            Channel::Vv => 2,
        }
    }
}

/// Single-look scattering vector (Shh, √2·Shv, Svv) in linear amplitude
/// units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatteringVector(pub [Complex64; 3]);

impl ScatteringVector {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// 3×3 Hermitian covariance matrix in power units.
///
/// Only the upper triangle is stored; the lower triangle is the conjugate
/// mirror, so the matrix is Hermitian by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceMatrix {
    c11: f64,
    c22: f64,
    c33: f64,
    c12: Complex64,
    c13: Complex64,
    c23: Complex64,
}

impl CovarianceMatrix {
    /// Build from explicit upper-triangle entries.
    ///
    /// Diagonal entries must be nonnegative and everything finite.
    pub fn new(
        c11: f64,
        c22: f64,
        c33: f64,
        c12: Complex64,
        c13: Complex64,
        c23: Complex64,
    ) -> Result<Self> {
        for &d in &[c11, c22, c33] {
            if !d.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite diagonal {d}")));
            }
            if d < 0.0 {
                return Err(Error::NegativeDiagonal { value: d });
            }
        }
        for z in [c12, c13, c23] {
            if !z.re.is_finite() || !z.im.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite entry {z}")));
            }
        }
        Ok(Self { c11, c22, c33, c12, c13, c23 })
    }

    pub fn zero() -> Self {
        Self {
            c11: 0.0,
            c22: 0.0,
            c33: 0.0,
            c12: Complex64::ZERO,
            c13: Complex64::ZERO,
            c23: Complex64::ZERO,
        }
    }

    /// Validate a full matrix as Hermitian (within `1e-12` relative to its
    /// largest entry) and mirror its upper triangle.
    pub fn from_matrix(m: &Matrix3<Complex64>) -> Result<Self> {
        let scale = m.iter().map(|z| z.norm()).fold(0.0_f64, f64::max).max(1.0);
        let mut max_asym = 0.0_f64;
        for i in 0..3 {
            for j in 0..3 {
                max_asym = max_asym.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        if max_asym > 1e-12 * scale {
            return Err(Error::NotHermitian { max_asymmetry: max_asym });
        }
        Self::new(
            m[(0, 0)].re,
            m[(1, 1)].re,
            m[(2, 2)].re,
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 2)],
        )
    }

    /// Estimate the covariance as the ensemble average of k·kᴴ over looks.
    ///
    /// The result is Hermitian positive semi-definite by construction
    /// (a Gram matrix).
    pub fn from_looks(looks: &[ScatteringVector]) -> Result<Self> {
        if looks.is_empty() {
            return Err(Error::NoLooks);
        }
        let mut c11 = 0.0;
        let mut c22 = 0.0;
        let mut c33 = 0.0;
        let mut c12 = Complex64::ZERO;
        let mut c13 = Complex64::ZERO;
        let mut c23 = Complex64::ZERO;
        for k in looks {
            let [k1, k2, k3] = k.0;
            c11 += k1.norm_sqr();
            c22 += k2.norm_sqr();
            c33 += k3.norm_sqr();
            c12 += k1 * k2.conj();
            c13 += k1 * k3.conj();
            c23 += k2 * k3.conj();
        }
        let n = looks.len() as f64;
        Ok(Self {
            c11: c11 / n,
            c22: c22 / n,
            c33: c33 / n,
            c12: c12 / n,
            c13: c13 / n,
            c23: c23 / n,
        })
    }

    /// Reconstruct a covariance from its normalized feature and total power.
    ///
    /// Hermitian by construction; PSD exactly when the feature satisfies the
    /// determinant constraint.
    pub fn from_feature(feat: &PolFeature, power: f64) -> Self {
        let [d1, d2, d3] = feat.delta;
        let [rho13, rho23, rho12] = feat.rho;
        Self {
            c11: power * d1,
            c22: power * d2,
            c33: power * d3,
            c12: rho12 * ((d1 * d2).sqrt() * power),
            c13: rho13 * ((d1 * d3).sqrt() * power),
            c23: rho23 * ((d2 * d3).sqrt() * power),
        }
    }

    /// Entry (i, j), mirroring the stored upper triangle.
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        match (i, j) {
            (0, 0) => Complex64::new(self.c11, 0.0),
            (1, 1) => Complex64::new(self.c22, 0.0),
            (2, 2) => Complex64::new(self.c33, 0.0),
            (0, 1) => self.c12,
            (0, 2) => self.c13,
            (1, 2) => self.c23,
            (1, 0) => self.c12.conj(),
            (2, 0) => self.c13.conj(),
            (2, 1) => self.c23.conj(),
            _ => panic!("covariance index ({i}, {j}) out of range"),
        }
    }

    pub fn diag(&self) -> [f64; 3] {
        [self.c11, self.c22, self.c33]
    }

    pub fn to_matrix(&self) -> Matrix3<Complex64> {
        Matrix3::from_fn(|i, j| self.get(i, j))
    }

    /// Total scattering power: trace of the covariance.
    pub fn span(&self) -> f64 {
        self.c11 + self.c22 + self.c33
    }

    /// Determinant via the Hermitian closed form (always real).
    pub fn det(&self) -> f64 {
        let triple = self.c12 * self.c23 * self.c13.conj();
        self.c11 * self.c22 * self.c33 + 2.0 * triple.re
            - self.c11 * self.c23.norm_sqr()
            - self.c22 * self.c13.norm_sqr()
            - self.c33 * self.c12.norm_sqr()
    }

    /// Smallest eigenvalue, via a Hermitian eigendecomposition. This is the
    /// oracle route for PSD checks and is entirely independent of the
    /// closed-form margin arithmetic in [`psd_check`] / [`psd_correct`].
    pub fn min_eigenvalue(&self) -> f64 {
        let eig = self.to_matrix().symmetric_eigen();
        eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Express the covariance in the normalized feature space.
    ///
    /// δi are the diagonal power ratios; the ρ are standard correlation
    /// coefficients. A channel with zero power leaves its correlations
    /// defined as 0 (their weight in the reconstruction is 0 regardless).
    pub fn normalize(&self) -> Result<(PolFeature, f64)> {
        let p = self.span();
        if p <= 0.0 {
            return Err(Error::ZeroPowerPixel);
        }
        let delta = [self.c11 / p, self.c22 / p, self.c33 / p];
        let rho = [
            correlation(self.c13, self.c11, self.c33),
            correlation(self.c23, self.c22, self.c33),
            correlation(self.c12, self.c11, self.c22),
        ];
        Ok((PolFeature { delta, rho }, p))
    }

    /// Unitary congruence from the lexicographic to the Pauli basis,
    /// producing the coherency matrix T. Trace is preserved.
    pub fn to_coherency(&self) -> CovarianceMatrix {
        let s = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let sqrt2 = Complex64::new(std::f64::consts::SQRT_2, 0.0);
        let u = Matrix3::new(
            s,
            Complex64::ZERO,
            s,
            s,
            Complex64::ZERO,
            -s,
            Complex64::ZERO,
            s * sqrt2,
            Complex64::ZERO,
        );
        let t = u * self.to_matrix() * u.adjoint();
        // Hermitian up to rounding; mirror the upper triangle directly and
        // clamp rounding on the diagonal.
        CovarianceMatrix {
            c11: t[(0, 0)].re.max(0.0),
            c22: t[(1, 1)].re.max(0.0),
            c33: t[(2, 2)].re.max(0.0),
            c12: t[(0, 1)],
            c13: t[(0, 2)],
            c23: t[(1, 2)],
        }
    }

    /// Relative Frobenius distance ‖a − b‖F / max(‖a‖F, ‖b‖F, 1).
    pub fn rel_frobenius(&self, other: &CovarianceMatrix) -> f64 {
        let mut num = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                num += (self.get(i, j) - other.get(i, j)).norm_sqr();
                na += self.get(i, j).norm_sqr();
                nb += other.get(i, j).norm_sqr();
            }
        }
        num.sqrt() / na.sqrt().max(nb.sqrt()).max(1.0)
    }
}

fn correlation(cross: Complex64, a: f64, b: f64) -> Complex64 {
    let denom = (a * b).sqrt();
    if denom <= 0.0 {
        return Complex64::ZERO;
    }
    let rho = cross / denom;
    let n = rho.norm();
    // Cauchy-Schwarz bounds |ρ| by 1; shave off rounding excess.
    if n > 1.0 {
        rho / n
    } else {
        rho
    }
}

/// Normalized polarimetric feature: three diagonal power ratios and three
/// complex correlation coefficients, ordered (ρ13, ρ23, ρ12).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolFeature {
    pub delta: [f64; 3],
    pub rho: [Complex64; 3],
}

/// Parameter labels in quantizer head order.
pub const PARAM_NAMES: [&str; 9] = [
    "delta1",
    "delta2",
    "delta3",
    "Re(rho13)",
    "Im(rho13)",
    "Re(rho23)",
    "Im(rho23)",
    "Re(rho12)",
    "Im(rho12)",
];

impl PolFeature {
    /// Check the type invariants: δ ∈ [0,1] summing to 1 within 1e-12, and
    /// each |ρ| ≤ 1.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.delta.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("delta sum {sum} is not 1")));
        }
        for &d in &self.delta {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::InvalidInput(format!("delta {d} outside [0,1]")));
            }
        }
        for r in &self.rho {
            let n = r.norm();
            if !(n <= 1.0 + 1e-12) {
                return Err(Error::InvalidInput(format!("|rho| = {n} exceeds 1")));
            }
        }
        Ok(())
    }

    /// The nine real parameters in head order: δ1, δ2, δ3, then Re/Im of
    /// ρ13, ρ23, ρ12.
    pub fn params(&self) -> [f64; 9] {
        [
            self.delta[0],
            self.delta[1],
            self.delta[2],
            self.rho[0].re,
            self.rho[0].im,
            self.rho[1].re,
            self.rho[1].im,
            self.rho[2].re,
            self.rho[2].im,
        ]
    }

    pub fn from_params(p: &[f64; 9]) -> Self {
        Self {
            delta: [p[0], p[1], p[2]],
            rho: [
                Complex64::new(p[3], p[4]),
                Complex64::new(p[5], p[6]),
                Complex64::new(p[7], p[8]),
            ],
        }
    }
}

/// Outcome of a PSD check or repair.
///
/// `margin` is the determinant-form third leading principal minor of the
/// normalized covariance; `eta` and `delta_phi` are the amplitude and phase
/// correction factors that were applied (1 and 0 when nothing was needed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub margin: f64,
    pub satisfied: bool,
    pub eta: f64,
    pub delta_phi: f64,
}

/// Evaluate the determinant constraint on the correlation coefficients.
///
/// The division-free form
/// `1 + 2·Re(ρ12·ρ23·ρ13*) − |ρ13|² − |ρ23|² − |ρ12|² ≥ −tolerance`
/// is used rather than the ratio form, which is undefined when any
/// amplitude vanishes.
pub fn psd_check(feat: &PolFeature, tolerance: f64) -> PsdReport {
    let [rho13, rho23, rho12] = feat.rho;
    let margin = 1.0 + 2.0 * (rho12 * rho23 * rho13.conj()).re
        - rho13.norm_sqr()
        - rho23.norm_sqr()
        - rho12.norm_sqr();
    PsdReport {
        margin,
        satisfied: margin >= -tolerance,
        eta: 1.0,
        delta_phi: 0.0,
    }
}

/// Two-step closed-form repair of the determinant constraint.
///
/// ρ13 is never modified. Step (a) shrinks the cross-pol amplitudes r12 and
/// r23 by a common factor η whenever no phase configuration could satisfy
/// the constraint; step (b) shifts φ12 and φ23 by Δφ/2 each so that
/// cos(φ12 + φ23 − φ13) lands exactly on the amplitude ratio bound. Inputs
/// that already pass [`psd_check`] at [`PSD_TOLERANCE`] are returned
/// bit-identically, which also makes the repair idempotent.
pub fn psd_correct(feat: &PolFeature) -> (PolFeature, PsdReport) {
    let check = psd_check(feat, PSD_TOLERANCE);
    if check.satisfied {
        return (*feat, check);
    }

    let [rho13, rho23, rho12] = feat.rho;
    let (r13, phi13) = rho13.to_polar();
    let (mut r23, mut phi23) = rho23.to_polar();
    let (mut r12, mut phi12) = rho12.to_polar();

    // Step (a): amplitude bound, multiplied out to avoid dividing by a zero
    // triple product. Failing it means even perfectly aligned phases cannot
    // make the determinant nonnegative.
    let mut eta = 1.0;
    if r13 * r13 + r23 * r23 + r12 * r12 - 1.0 > 2.0 * r12 * r13 * r23 {
        // The denominator is strictly positive whenever the bound fails.
        let denom = r23 * r23 + r12 * r12 - 2.0 * r13 * r23 * r12;
        eta = ((1.0 - r13 * r13) / denom).max(0.0).sqrt();
        r23 *= eta;
        r12 *= eta;
    }

    // Step (b): with the amplitude bound holding, shift the cross-pol
    // phases onto the equality point if the current phase sum violates it.
    let mut delta_phi = 0.0;
    let triple = 2.0 * r12 * r13 * r23;
    if triple > 0.0 {
        let ratio = (r13 * r13 + r23 * r23 + r12 * r12 - 1.0) / triple;
        if (phi12 + phi23 - phi13).cos() < ratio {
            delta_phi = ratio.clamp(-1.0, 1.0).acos() - phi23 - phi12 + phi13;
            phi12 += delta_phi / 2.0;
            phi23 += delta_phi / 2.0;
        }
    }

    let corrected = PolFeature {
        delta: feat.delta,
        rho: [
            rho13,
            Complex64::from_polar(r23, phi23),
            Complex64::from_polar(r12, phi12),
        ],
    };
    let after = psd_check(&corrected, PSD_TOLERANCE);
    (
        corrected,
        PsdReport {
            margin: after.margin,
            satisfied: after.satisfied,
            eta,
            delta_phi,
        },
    )
}

/// Recover total power from one channel's intensity via P = I / δ.
///
/// HV intensity is understood as the full cross-pol power 2⟨|Shv|²⟩, i.e.
/// the C22 entry. Returns [`Error::UnrecoverablePower`] when δ is at or
/// below [`DELTA_FLOOR`]; the caller decides on a fallback.
pub fn power_from_channel(intensity: f64, feat: &PolFeature, channel: Channel) -> Result<f64> {
    let delta = feat.delta[channel.diag_index()];
    if delta <= DELTA_FLOOR {
        return Err(Error::UnrecoverablePower { delta });
    }
    Ok(intensity / delta)
}

/// Hermitian eigendecomposition with eigenvalues sorted descending and
/// ties broken by eigenvector lexicographic order. Eigenvectors are the
/// columns of the returned matrix.
pub fn sorted_hermitian_eigen(m: &Matrix3<Complex64>) -> (Vector3<f64>, Matrix3<Complex64>) {
    let eig = m.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let va = eig.eigenvectors.column(a);
                let vb = eig.eigenvectors.column(b);
                for i in 0..3 {
                    match va[i]
                        .norm()
                        .partial_cmp(&vb[i].norm())
                        .unwrap_or(std::cmp::Ordering::Equal)
                    {
                        std::cmp::Ordering::Equal => continue,
                        other => return other.reverse(),
                    }
                }
                std::cmp::Ordering::Equal
            })
    });
    let values = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let mut vectors = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}
