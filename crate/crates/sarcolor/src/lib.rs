//! Reconstruction of fully polarimetric SAR covariance images from
//! single-polarization grayscale intensity.
//!
//! The library is organized around a two-stage neural pipeline: a
//! convolutional feature extractor turns a preprocessed intensity patch into
//! multi-scale spatial features, and a fully-connected translator maps each
//! pixel's hyper-column descriptor onto a quantized polarimetric feature
//! space from which the 3×3 covariance matrix is rebuilt. Supporting modules
//! provide the exact covariance algebra with a closed-form positive
//! semi-definiteness repair ([`polmath`]), histogram-equalized scalar
//! quantization ([`quantizer`]), a minimal forward/backward network engine
//! ([`neuralnet`]), synthetic full-pol scene generation ([`synthdata`]),
//! reconstruction quality metrics ([`evalmetrics`]), polarimetric target
//! decompositions ([`decomp`]), and a fixed binary raster format
//! ([`raster`]).

pub mod decomp;
pub mod error;
pub mod evalmetrics;
pub mod neuralnet;
pub mod pipeline;
pub mod polmath;
pub mod quantizer;
pub mod raster;
pub mod synthdata;

pub use error::{Error, Result};
