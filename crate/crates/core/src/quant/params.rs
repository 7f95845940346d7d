use serde::{Deserialize, Serialize};

use super::{QuantConfig, QuantError, SCALE_FLOOR};
use crate::tensor::DenseMatrix;

/// Per-group scales and zero points for an `I×O` weight matrix.
///
/// `scales` and `zeros` are row-major `G×O`; `g_idx[i] = ⌊i / groupsize⌋`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupQuantParams {
    pub scales: Vec<f32>,
    pub zeros: Vec<u32>,
    pub g_idx: Vec<u32>,
    pub num_groups: usize,
    pub out_features: usize,
}

impl GroupQuantParams {
    pub fn in_features(&self) -> usize {
        self.g_idx.len()
    }

    #[inline]
    pub fn scale(&self, group: usize, col: usize) -> f32 {
        self.scales[group * self.out_features + col]
    }

    #[inline]
    pub fn zero(&self, group: usize, col: usize) -> u32 {
        self.zeros[group * self.out_features + col]
    }

    /// Builds `g_idx` for `rows` input rows split into groups of `group_rows`.
    pub fn group_index(rows: usize, group_rows: usize) -> Vec<u32> {
        (0..rows).map(|i| (i / group_rows) as u32).collect()
    }

    pub fn validate(&self, bits: u32) -> Result<(), QuantError> {
        let cells = self.num_groups * self.out_features;
        if self.scales.len() != cells || self.zeros.len() != cells {
            return Err(QuantError::Invalid("scale/zero grid shape".into()));
        }
        if self.scales.iter().any(|s| s.is_nan() || *s <= 0.0 || s.is_infinite()) {
            return Err(QuantError::Invalid("scales must be positive and finite".into()));
        }
        let max_code = (1u32 << bits) - 1;
        if self.zeros.iter().any(|&z| z > max_code) {
            return Err(QuantError::Invalid(format!("zero point above {max_code}")));
        }
        if self.g_idx.windows(2).any(|w| w[0] > w[1]) || self.g_idx.iter().any(|&g| g as usize >= self.num_groups) {
            return Err(QuantError::Invalid("g_idx must be nondecreasing and in range".into()));
        }
        Ok(())
    }
}

/// Fits `(scale, zero)` for one (group, column) slice of weights.
pub(crate) fn fit_scale_zero(values: impl Iterator<Item = f32>, cfg: &QuantConfig) -> (f32, u32) {
    let max_code = cfg.max_code();
    if cfg.symmetric {
        let amax = values.fold(0.0f32, |m, v| m.max(v.abs()));
        let half = 1u32 << (cfg.bits - 1);
        let scale = (amax / (half - 1) as f32).max(SCALE_FLOOR);
        (scale, half)
    } else {
        // the range always contains 0 so that zero is exactly representable
        let (lo, hi) = values.fold((0.0f32, 0.0f32), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let scale = ((hi - lo) / max_code as f32).max(SCALE_FLOOR);
        let zero = (-lo / scale).round_ties_even().clamp(0.0, max_code as f32) as u32;
        (scale, zero)
    }
}

/// Min/max group parameters for `w` (asymmetric), or abs-max (symmetric).
pub fn compute_group_params(w: &DenseMatrix, cfg: &QuantConfig) -> GroupQuantParams {
    let (rows, cols) = w.shape();
    let group_rows = cfg.group_rows(rows);
    let num_groups = cfg.num_groups(rows);
    let mut scales = vec![0.0f32; num_groups * cols];
    let mut zeros = vec![0u32; num_groups * cols];
    for g in 0..num_groups {
        let r0 = g * group_rows;
        let r1 = (r0 + group_rows).min(rows);
        for c in 0..cols {
            let (s, z) = fit_scale_zero((r0..r1).map(|r| w.get(r, c)), cfg);
            scales[g * cols + c] = s;
            zeros[g * cols + c] = z;
        }
    }
    GroupQuantParams {
        scales,
        zeros,
        g_idx: GroupQuantParams::group_index(rows, group_rows),
        num_groups,
        out_features: cols,
    }
}
