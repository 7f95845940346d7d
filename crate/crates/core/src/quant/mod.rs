//! Group-wise weight quantization.
//!
//! Weights are `I×O` matrices (input rows, output columns). Groups are
//! contiguous blocks of `groupsize` input rows; each (group, column) pair
//! gets its own scale and integer zero point, and `g_idx[i]` maps input row
//! `i` to its group. Dequantization is `(q − zero) × scale`.

mod gptq;
mod params;
mod rtn;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gptq::gptq_quantize;
pub use params::{compute_group_params, GroupQuantParams};
pub use rtn::{dequantize_matrix, proxy_loss, quantize_with_params, rtn_quantize, QuantizedMatrix};

/// Smallest scale a group may have; keeps constant groups invertible.
pub const SCALE_FLOOR: f32 = 1e-8;

/// Default damping ratio λ / mean(diag(H)).
pub const DEFAULT_DAMP_RATIO: f32 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("unsupported bit width {0} (expected 2, 4 or 8)")]
    InvalidBits(u32),
    #[error("invalid groupsize {0} (expected a positive row count or -1)")]
    InvalidGroupsize(i64),
    #[error("damping ratio must be positive and finite, got {0}")]
    InvalidDamp(f32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Cholesky factorization failed; the Hessian is not positive definite (increase damping)")]
    CholeskyFailed,
    #[error("invalid quantized matrix: {0}")]
    Invalid(String),
}

/// Quantization settings shared by the RTN and Hessian-weighted paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    /// Rows per group, or `-1` for a single group spanning all rows.
    pub groupsize: i64,
    pub symmetric: bool,
    pub damp_ratio: f32,
}

impl QuantConfig {
    pub fn new(bits: u32, groupsize: i64) -> Result<Self, QuantError> {
        let cfg = Self {
            bits,
            groupsize,
            symmetric: false,
            damp_ratio: DEFAULT_DAMP_RATIO,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn symmetric(mut self, symmetric: bool) -> Self {
        self.symmetric = symmetric;
        self
    }

    pub fn with_damp_ratio(mut self, damp_ratio: f32) -> Self {
        self.damp_ratio = damp_ratio;
        self
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        validate_bits(self.bits)?;
        if self.groupsize == 0 || self.groupsize < -1 {
            return Err(QuantError::InvalidGroupsize(self.groupsize));
        }
        if self.damp_ratio.is_nan() || self.damp_ratio <= 0.0 || self.damp_ratio.is_infinite() {
            return Err(QuantError::InvalidDamp(self.damp_ratio));
        }
        Ok(())
    }

    /// Largest integer code, `2^N − 1`.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Rows per group for a matrix with `rows` input rows.
    pub fn group_rows(&self, rows: usize) -> usize {
        if self.groupsize < 0 {
            rows.max(1)
        } else {
            self.groupsize as usize
        }
    }

    /// Group count `⌈rows / groupsize⌉`.
    pub fn num_groups(&self, rows: usize) -> usize {
        rows.div_ceil(self.group_rows(rows))
    }
}

pub fn validate_bits(bits: u32) -> Result<(), QuantError> {
    match bits {
        2 | 4 | 8 => Ok(()),
        other => Err(QuantError::InvalidBits(other)),
    }
}

#[inline]
pub(crate) fn quantize_scalar(w: f32, scale: f32, zero: u32, max_code: u32) -> u32 {
    let q = (w / scale).round_ties_even() + zero as f32;
    q.clamp(0.0, max_code as f32) as u32
}

#[inline]
pub(crate) fn dequantize_scalar(q: u32, scale: f32, zero: u32) -> f32 {
    (q as f32 - zero as f32) * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(4, 128).is_ok());
        assert!(QuantConfig::new(4, -1).is_ok());
        assert_eq!(QuantConfig::new(3, 128), Err(QuantError::InvalidBits(3)));
        assert_eq!(QuantConfig::new(16, 128), Err(QuantError::InvalidBits(16)));
        assert_eq!(QuantConfig::new(4, 0), Err(QuantError::InvalidGroupsize(0)));
        assert_eq!(QuantConfig::new(4, -2), Err(QuantError::InvalidGroupsize(-2)));
        let bad = QuantConfig::new(4, 8).unwrap().with_damp_ratio(0.0);
        assert_eq!(bad.validate(), Err(QuantError::InvalidDamp(0.0)));
    }

    #[test]
    fn group_counts() {
        let cfg = QuantConfig::new(4, 128).unwrap();
        assert_eq!(cfg.num_groups(256), 2);
        assert_eq!(cfg.num_groups(257), 3);
        assert_eq!(QuantConfig::new(4, -1).unwrap().num_groups(300), 1);
    }

    #[test]
    fn scalar_rounding() {
        assert_eq!(quantize_scalar(0.6, 1.0, 0, 15), 1);
        assert_eq!(dequantize_scalar(1, 1.0, 0), 1.0);
        assert_eq!(dequantize_scalar(3, 0.5, 1), 1.0);
        assert_eq!(quantize_scalar(100.0, 1.0, 0, 15), 15);
        assert_eq!(quantize_scalar(-100.0, 1.0, 3, 15), 0);
    }
}
