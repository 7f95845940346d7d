//! Fused dequantize-and-multiply over packed layers.
//!
//! [`quant_matmul`] computes `A × dequant(L) + bias` block by block: each
//! `block_m × block_d` output tile walks the reduction axis in `block_k`
//! slabs, dequantizes the slab of packed weights into a scratch tile once
//! and reuses it for every row of the tile. Tiles own disjoint output
//! regions and are spread over `workers` threads.

mod autotune;
mod matmul;
pub mod span;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use autotune::{autotune, autotune_with, default_candidates, AutotuneResult, Timer, WallClock};
pub use matmul::{quant_matmul, quant_matmul_traced, reference_matmul};
pub use span::{SpanId, SpanRecorder, TimingSpan};

use crate::pack::lanes_per_word;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid tile config {config}: {reason}")]
    InvalidTile { config: TileConfig, reason: String },
    #[error("autotune needs at least one candidate config")]
    EmptyCandidates,
    #[error("none of the {0} candidate configs is valid for this problem")]
    NoValidCandidates(usize),
    #[error("autotune needs at least 3 timed runs, got {0}")]
    InvalidRuns(usize),
}

/// Block and thread configuration `{M, D, K}` / `{W_n, S_n}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileConfig {
    pub block_m: usize,
    pub block_d: usize,
    pub block_k: usize,
    pub workers: usize,
    /// Pipeline depth. Recorded for parity with GPU configs; the CPU kernel
    /// has no staging and ignores it.
    #[serde(default = "default_stages")]
    pub stages: usize,
}

fn default_stages() -> usize {
    1
}

impl std::fmt::Display for TileConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "M{}xD{}xK{}/w{}s{}",
            self.block_m, self.block_d, self.block_k, self.workers, self.stages
        )
    }
}

const MIN_TILE: usize = 8;
const MAX_TILE: usize = 256;

impl TileConfig {
    pub fn new(block_m: usize, block_d: usize, block_k: usize, workers: usize) -> Self {
        Self {
            block_m,
            block_d,
            block_k,
            workers,
            stages: 1,
        }
    }

    /// Checks tile sizes are powers of two in `[8, 256]` and that `block_k`
    /// covers whole packed words at `bits`.
    pub fn validate(&self, bits: u32) -> Result<(), KernelError> {
        let fail = |reason: String| KernelError::InvalidTile { config: *self, reason };
        for (name, v) in [
            ("block_m", self.block_m),
            ("block_d", self.block_d),
            ("block_k", self.block_k),
        ] {
            if !v.is_power_of_two() || !(MIN_TILE..=MAX_TILE).contains(&v) {
                return Err(fail(format!("{name}={v} is not a power of two in [8, 256]")));
            }
        }
        let lanes = lanes_per_word(bits).map_err(|e| fail(e.to_string()))?;
        if !self.block_k.is_multiple_of(lanes) {
            return Err(fail(format!("block_k={} splits {lanes}-lane words", self.block_k)));
        }
        if self.workers == 0 {
            return Err(fail("workers must be at least 1".into()));
        }
        if self.stages == 0 {
            return Err(fail("stages must be at least 1".into()));
        }
        Ok(())
    }
}
