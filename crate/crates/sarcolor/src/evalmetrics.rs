//! Quantitative similarity metrics between reconstructed and true full-pol
//! images: per-parameter mean absolute error, per-channel coherency index,
//! and the per-pixel Bartlett distance with its histogram. The report also
//! separates quantization-only error from total error when quantizer
//! tables are available.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::polmath::{CovarianceMatrix, PARAM_NAMES};
use crate::quantizer::{param_range, QuantizerTable};
use crate::raster::{Layout, PolRaster};

/// Bartlett histogram: 100 bins of width 0.1 over [0, 10] plus one
/// overflow bin.
pub const BARTLETT_BINS: usize = 101;

/// Covariance channel labels in report order.
pub const CHANNEL_NAMES: [&str; 6] = ["C11", "C22", "C33", "C13", "C23", "C12"];

/// Mean absolute error between two equally sized planes.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("two equal nonempty planes, left has {}", a.len()),
            got: format!("{}", b.len()),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Coherency index between two complex planes:
/// Σ a·conj(b) / √(Σ|a|²·Σ|b|²). Magnitude is bounded by 1.
pub fn coi(a: &[Complex64], b: &[Complex64]) -> Result<Complex64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("two equal nonempty planes, left has {}", a.len()),
            got: format!("{}", b.len()),
        });
    }
    let mut cross = Complex64::ZERO;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cross += x * y.conj();
        na += x.norm_sqr();
        nb += y.norm_sqr();
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("undefined coherency: all-zero plane".into()));
    }
    Ok(cross / (na * nb).sqrt())
}

/// Bartlett distance 2·ln(det((A+B)/2) / √(det A · det B)).
///
/// Inputs must be positive definite; a detected zero eigenvalue is
/// regularized with a +1e-10·trace·I ridge first. Zero exactly when A = B.
pub fn bartlett(a: &CovarianceMatrix, b: &CovarianceMatrix) -> Result<f64> {
    let a = regularize(a);
    let b = regularize(b);
    let det_a = a.det();
    let det_b = b.det();
    if !is_positive_definite(&a) || !is_positive_definite(&b) {
        return Err(Error::NotPositiveDefinite);
    }
    let mid = mean_matrix(&a, &b);
    let det_m = mid.det();
    if det_m <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(2.0 * (det_m / (det_a * det_b).sqrt()).ln())
}

fn regularize(c: &CovarianceMatrix) -> CovarianceMatrix {
    if is_positive_definite(c) {
        return *c;
    }
    // Exactly singular matrices (the PSD repair lands on a zero margin)
    // and storage rounding can both push eigenvalues to or below zero;
    // shift any negative part out and add the fixed ridge on top.
    let span = c.span().max(f64::MIN_POSITIVE);
    let ridge = 1e-10 * span + (-c.min_eigenvalue()).max(0.0);
    let d = c.diag();
    CovarianceMatrix::new(
        d[0] + ridge,
        d[1] + ridge,
        d[2] + ridge,
        c.get(0, 1),
        c.get(0, 2),
        c.get(1, 2),
    )
    .expect("ridge keeps diagonal nonnegative")
}

fn is_positive_definite(c: &CovarianceMatrix) -> bool {
    // Sylvester: all leading principal minors strictly positive.
    let d = c.diag();
    d[0] > 0.0 && d[0] * d[1] - c.get(0, 1).norm_sqr() > 0.0 && c.det() > 0.0
}

fn mean_matrix(a: &CovarianceMatrix, b: &CovarianceMatrix) -> CovarianceMatrix {
    let da = a.diag();
    let db = b.diag();
    CovarianceMatrix::new(
        0.5 * (da[0] + db[0]),
        0.5 * (da[1] + db[1]),
        0.5 * (da[2] + db[2]),
        0.5 * (a.get(0, 1) + b.get(0, 1)),
        0.5 * (a.get(0, 2) + b.get(0, 2)),
        0.5 * (a.get(1, 2) + b.get(1, 2)),
    )
    .expect("mean of valid covariances is valid")
}

/// Full evaluation report.
#[derive(Debug, Clone)]
pub struct MetricReport {
    /// Total per-parameter MAE between the normalized features of the
    /// reconstruction and the truth.
    pub mae_total: [f64; 9],
    /// Quantize-and-decode-only MAE on the truth (needs tables).
    pub mae_quantizer: Option<[f64; 9]>,
    /// Same, with uniform bins over each parameter range.
    pub mae_quantizer_uniform: Option<[f64; 9]>,
    /// Coherency index per covariance channel, in [`CHANNEL_NAMES`] order.
    pub coi: [Complex64; 6],
    /// Per-pixel Bartlett distance map.
    pub bartlett_map: PolRaster,
    /// Histogram of the map: bins of width 0.1 over [0, 10] plus overflow.
    pub bartlett_hist: [u64; BARTLETT_BINS],
    /// Median of the per-pixel Bartlett distances.
    pub bartlett_median: f64,
}

impl MetricReport {
    /// CSV rendering: one row per parameter with the error columns, then
    /// one row per covariance channel with the coherency index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,eps_q_uniform,eps_q,eps,coi_abs,coi_re,coi_im\n");
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            let equ = self
                .mae_quantizer_uniform
                .map_or(String::new(), |v| format!("{:.6}", v[i]));
            let eq = self
                .mae_quantizer
                .map_or(String::new(), |v| format!("{:.6}", v[i]));
            out.push_str(&format!("{name},{equ},{eq},{:.6},,,\n", self.mae_total[i]));
        }
        for (i, name) in CHANNEL_NAMES.iter().enumerate() {
            let c = self.coi[i];
            out.push_str(&format!(
                "{name},,,,{:.6},{:.6},{:.6}\n",
                c.norm(),
                c.re,
                c.im
            ));
        }
        out.push_str(&format!("bartlett_median,,,{:.6},,,\n", self.bartlett_median));
        out
    }
}

/// Gather the six complex channel planes of a COV9 raster in
/// [`CHANNEL_NAMES`] order.
fn channel_planes(r: &PolRaster) -> [Vec<Complex64>; 6] {
    let n = r.pixels();
    let mut planes: [Vec<Complex64>; 6] = std::array::from_fn(|_| Vec::with_capacity(n));
    for y in 0..r.height {
        for x in 0..r.width {
            let g = |c: usize| r.get(x, y, c) as f64;
            planes[0].push(Complex64::new(g(0), 0.0));
            planes[1].push(Complex64::new(g(1), 0.0));
            planes[2].push(Complex64::new(g(2), 0.0));
            planes[3].push(Complex64::new(g(5), g(6))); // C13
            planes[4].push(Complex64::new(g(7), g(8))); // C23
            planes[5].push(Complex64::new(g(3), g(4))); // C12
        }
    }
    planes
}

/// Evaluate a reconstruction against the truth.
///
/// Quantizer tables, when given, additionally produce the
/// quantization-only error columns (non-uniform and uniform) computed by
/// encoding and decoding the true parameters without any network.
pub fn evaluate(
    recon: &PolRaster,
    truth: &PolRaster,
    tables: Option<&[QuantizerTable; 9]>,
) -> Result<MetricReport> {
    if recon.layout != Layout::Cov9 || truth.layout != Layout::Cov9 {
        return Err(Error::ShapeMismatch {
            expected: "COV9 rasters".into(),
            got: format!("{:?} vs {:?}", recon.layout, truth.layout),
        });
    }
    if recon.width != truth.width || recon.height != truth.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.width, truth.height),
            got: format!("{}x{}", recon.width, recon.height),
        });
    }
    let n = truth.pixels();

    let mut recon_params = vec![[0.0f64; 9]; n];
    let mut truth_params = vec![[0.0f64; 9]; n];
    let mut bartlett_map = PolRaster::new(truth.width, truth.height, Layout::Gray1);
    let mut hist = [0u64; BARTLETT_BINS];
    let mut distances = Vec::with_capacity(n);

    for y in 0..truth.height {
        for x in 0..truth.width {
            let idx = (y * truth.width + x) as usize;
            let cr = recon.covariance(x, y)?;
            let ct = truth.covariance(x, y)?;
            recon_params[idx] = cr.normalize()?.0.params();
            truth_params[idx] = ct.normalize()?.0.params();
            let d = bartlett(&cr, &ct)?.max(0.0);
            bartlett_map.set(x, y, 0, d as f32);
            distances.push(d);
            let bin = if d >= 10.0 { 100 } else { (d / 0.1) as usize };
            hist[bin.min(100)] += 1;
        }
    }

    let mut mae_total = [0.0f64; 9];
    for (i, m) in mae_total.iter_mut().enumerate() {
        let a: Vec<f64> = recon_params.iter().map(|p| p[i]).collect();
        let b: Vec<f64> = truth_params.iter().map(|p| p[i]).collect();
        *m = mae(&a, &b)?;
    }

    let (mae_quantizer, mae_quantizer_uniform) = match tables {
        Some(tables) => {
            let mut mq = [0.0f64; 9];
            let mut mqu = [0.0f64; 9];
            for i in 0..9 {
                let truth_plane: Vec<f64> = truth_params.iter().map(|p| p[i]).collect();
                let decoded: Vec<f64> =
                    truth_plane.iter().map(|&v| tables[i].roundtrip(v)).collect();
                mq[i] = mae(&decoded, &truth_plane)?;
                let uniform = QuantizerTable::uniform(i, tables[i].bins(), param_range(i))?;
                let decoded_u: Vec<f64> =
                    truth_plane.iter().map(|&v| uniform.roundtrip(v)).collect();
                mqu[i] = mae(&decoded_u, &truth_plane)?;
            }
            (Some(mq), Some(mqu))
        }
        None => (None, None),
    };

    let rp = channel_planes(recon);
    let tp = channel_planes(truth);
    let mut coi_out = [Complex64::ZERO; 6];
    for i in 0..6 {
        coi_out[i] = coi(&rp[i], &tp[i])?;
    }

    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let bartlett_median = if n % 2 == 1 {
        distances[n / 2]
    } else {
        0.5 * (distances[n / 2 - 1] + distances[n / 2])
    };

    Ok(MetricReport {
        mae_total,
        mae_quantizer,
        mae_quantizer_uniform,
        coi: coi_out,
        bartlett_map,
        bartlett_hist: hist,
        bartlett_median,
    })
}
