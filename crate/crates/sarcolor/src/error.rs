//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Covariance estimation was asked to average an empty look set.
    #[error("no looks")]
    NoLooks,

    /// An operation that divides by total power met a pixel with span ≤ 0.
    #[error("zero-power pixel")]
    ZeroPowerPixel,

    /// Power recovery per input channel needs the channel's δ above the
    /// floor; the caller decides on a fallback.
    #[error("unrecoverable power: channel delta {delta:e} at or below floor")]
    UnrecoverablePower { delta: f64 },

    /// A matrix handed in as Hermitian was not, within tolerance.
    #[error("matrix is not Hermitian (max asymmetry {max_asymmetry:e})")]
    NotHermitian { max_asymmetry: f64 },

    /// A covariance diagonal entry was negative.
    #[error("negative diagonal power {value:e}")]
    NegativeDiagonal { value: f64 },

    /// A probability vector failed validation (negative mass, wrong sum,
    /// or wrong length).
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// Tensor or raster dimensions do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A quantizer was asked to do something its table cannot support.
    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),

    /// A matrix that must be positive definite is not, even after
    /// regularization.
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    /// Input values outside the documented domain of an operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Raster file does not start with the expected magic bytes.
    #[error("bad magic")]
    BadMagic,

    /// Raster or checkpoint file has an unrecognized format version.
    #[error("unknown version {0}")]
    UnknownVersion(u16),

    /// Raster file declares a layout code this build does not know.
    #[error("unknown layout {0}")]
    UnknownLayout(u16),

    /// File ended before the declared payload was complete.
    #[error("truncated payload")]
    TruncatedPayload,

    /// Malformed configuration file or inconsistent configuration values.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Checkpoint file is structurally invalid.
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("png encoding failed: {0}")]
    Png(String),
}
