//! Non-uniform scalar quantization of the nine polarimetric parameters.
//!
//! Each parameter gets its own K-bin table fitted by histogram
//! equalization: bin edges sit at the empirical quantiles of the training
//! sample so every bin holds roughly the same mass, and bin centers are the
//! per-bin sample medians. Decoding turns a softmax distribution over the
//! bins back into a continuous value, either by taking the mode bin's
//! center or the probability-weighted mean of all centers.

use crate::error::{Error, Result};

/// Default bin count; 32 levels keep the quantization error negligible
/// next to the reconstruction error.
pub const DEFAULT_BINS: usize = 32;

/// How a softmax distribution over bins is collapsed to a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeRule {
    /// Center of the highest-probability bin (ties go to the lowest index).
    Mode,
    /// Probability-weighted mean of the bin centers.
    Mean,
}

/// Per-parameter quantization table.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerTable {
    /// Which of the nine parameters this table serves (0..=8 in the order
    /// δ1, δ2, δ3, Re ρ13, Im ρ13, Re ρ23, Im ρ23, Re ρ12, Im ρ12).
    pub param_id: usize,
    /// Strictly increasing bin edges spanning the parameter range;
    /// `edges.len() == k + 1`.
    pub edges: Vec<f64>,
    /// One representative value inside each bin.
    pub centers: Vec<f64>,
    /// Set when fitting had to fall back to uniform bins because the sample
    /// had fewer than k distinct values.
    pub uniform_fallback: bool,
}

impl QuantizerTable {
    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    /// Uniform table over the range: equal-width bins, midpoint centers.
    pub fn uniform(param_id: usize, k: usize, range: (f64, f64)) -> Result<Self> {
        let (lo, hi) = range;
        if k < 2 {
            return Err(Error::InvalidQuantizer(format!("k = {k} must be >= 2")));
        }
        if !(hi > lo) {
            return Err(Error::InvalidQuantizer(format!("empty range [{lo}, {hi}]")));
        }
        let width = (hi - lo) / k as f64;
        let edges: Vec<f64> = (0..=k)
            .map(|i| if i == k { hi } else { lo + width * i as f64 })
            .collect();
        let centers = (0..k).map(|i| lo + width * (i as f64 + 0.5)).collect();
        Ok(Self {
            param_id,
            edges,
            centers,
            uniform_fallback: false,
        })
    }

    /// Fit a histogram-equalized table: edge i sits at the i/k empirical
    /// quantile of the clamped sample, centers are per-bin medians (empty
    /// bins get their midpoint).
    ///
    /// Fewer than k distinct clamped values means quantiles cannot separate
    /// the bins; the table falls back to uniform bins with
    /// `uniform_fallback` set.
    pub fn fit(samples: &[f64], k: usize, range: (f64, f64)) -> Result<Self> {
        let (lo, hi) = range;
        if k < 2 {
            return Err(Error::InvalidQuantizer(format!("k = {k} must be >= 2")));
        }
        if !(hi > lo) {
            return Err(Error::InvalidQuantizer(format!("empty range [{lo}, {hi}]")));
        }
        let mut sorted: Vec<f64> = samples
            .iter()
            .filter(|v| v.is_finite())
            .map(|v| v.clamp(lo, hi))
            .collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let mut distinct = 0usize;
        for i in 0..sorted.len() {
            if i == 0 || sorted[i] > sorted[i - 1] {
                distinct += 1;
            }
        }
        if distinct < k {
            let mut table = Self::uniform(0, k, range)?;
            table.uniform_fallback = true;
            return Ok(table);
        }

        let n = sorted.len();
        let mut edges = Vec::with_capacity(k + 1);
        edges.push(lo);
        for i in 1..k {
            edges.push(sorted[i * n / k]);
        }
        edges.push(hi);
        // A value with more than n/k duplicates collapses consecutive
        // quantiles; give it a dedicated one-ulp bin to keep edges strictly
        // increasing.
        for i in 1..=k {
            if edges[i] <= edges[i - 1] {
                edges[i] = edges[i - 1].next_up();
            }
        }

        let mut centers = Vec::with_capacity(k);
        let mut start = 0usize;
        for bin in 0..k {
            let end = if bin == k - 1 {
                n
            } else {
                sorted.partition_point(|&v| v < edges[bin + 1]).max(start)
            };
            if end > start {
                centers.push(sorted[start + (end - start) / 2]);
            } else {
                centers.push(0.5 * (edges[bin] + edges[bin + 1]));
            }
            start = end;
        }

        Ok(Self {
            param_id: 0,
            edges,
            centers,
            uniform_fallback: false,
        })
    }

    /// Bin index of a value; out-of-range values are clamped first, and the
    /// upper range endpoint maps into the last bin.
    pub fn encode(&self, value: f64) -> usize {
        let k = self.bins();
        let v = if value.is_nan() {
            self.lo()
        } else {
            value.clamp(self.lo(), self.hi())
        };
        // edges[i] <= v < edges[i+1]
        let idx = self.edges.partition_point(|&e| e <= v);
        idx.saturating_sub(1).min(k - 1)
    }

    /// Collapse a probability vector over the bins back to a value.
    pub fn decode(&self, probs: &[f64], rule: DecodeRule) -> Result<f64> {
        let k = self.bins();
        if probs.len() != k {
            return Err(Error::InvalidDistribution(format!(
                "expected {k} probabilities, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for &p in probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("bad mass {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!("sum {sum} is not 1")));
        }
        match rule {
            DecodeRule::Mode => {
                let mut best = 0usize;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                Ok(self.centers[best])
            }
            DecodeRule::Mean => Ok(probs
                .iter()
                .zip(&self.centers)
                .map(|(p, c)| p * c)
                .sum()),
        }
    }

    /// Encode-then-decode of a single value (one-hot roundtrip).
    pub fn roundtrip(&self, value: f64) -> f64 {
        self.centers[self.encode(value)]
    }

    /// Largest half bin width: an upper bound for median-center roundtrip
    /// error over the fitting sample.
    pub fn max_half_width(&self) -> f64 {
        self.edges
            .windows(2)
            .map(|w| (w[1] - w[0]) / 2.0)
            .fold(0.0, f64::max)
    }
}

/// Value range for each of the nine parameters: [0,1] for the δ ratios,
/// [−1,1] for the real and imaginary parts of the ρ coefficients.
pub fn param_range(param_id: usize) -> (f64, f64) {
    if param_id < 3 {
        (0.0, 1.0)
    } else {
        (-1.0, 1.0)
    }
}

/// Fit all nine tables from per-parameter sample planes.
pub fn fit_all(planes: &[Vec<f64>; 9], k: usize) -> Result<[QuantizerTable; 9]> {
    let mut tables = Vec::with_capacity(9);
    for (id, plane) in planes.iter().enumerate() {
        let mut t = QuantizerTable::fit(plane, k, param_range(id))?;
        t.param_id = id;
        tables.push(t);
    }
    Ok(tables.try_into().expect("nine tables"))
}
