//! Pick the fastest [`TileConfig`] for a problem by timing every candidate.
//!
//! Each valid candidate runs once untimed, then `runs` timed executions; its
//! score is the median. The best config is the argmin of the scores (first
//! wins on ties). Timing goes through a [`Timer`] so tests can inject a
//! deterministic clock.

use std::time::Instant;

use super::{quant_matmul, KernelError, TileConfig};
use crate::pack::PackedLinear;
use crate::tensor::{seeded_random_matrix, DenseMatrix};

/// Measures one execution of `work` for `config`, in nanoseconds.
pub trait Timer {
    fn time(&mut self, config: &TileConfig, work: &mut dyn FnMut()) -> u64;
}

/// Monotonic wall-clock timer.
#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl Timer for WallClock {
    fn time(&mut self, _config: &TileConfig, work: &mut dyn FnMut()) -> u64 {
        let start = Instant::now();
        work();
        start.elapsed().as_nanos() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutotuneResult {
    pub best: TileConfig,
    /// `(config, median ns)` for every valid candidate, in input order.
    pub table: Vec<(TileConfig, u64)>,
    /// Candidates skipped because they violate the tile invariants.
    pub rejected: Vec<(TileConfig, String)>,
}

impl AutotuneResult {
    pub fn median_of(&self, config: &TileConfig) -> Option<u64> {
        self.table.iter().find(|(c, _)| c == config).map(|&(_, t)| t)
    }
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Tunes on a seeded random `M×K` input against `layer` (`K×D`) using the
/// wall clock.
pub fn autotune(
    m: usize,
    k: usize,
    d: usize,
    layer: &PackedLinear,
    candidates: &[TileConfig],
    runs: usize,
) -> Result<AutotuneResult, KernelError> {
    if layer.in_features != k || layer.out_features != d {
        return Err(KernelError::ShapeMismatch(format!(
            "layer is {}x{}, problem asks for K={k}, D={d}",
            layer.in_features, layer.out_features
        )));
    }
    let a = seeded_random_matrix(m.max(1), k.max(1), 0x5eed).map_err(|e| KernelError::ShapeMismatch(e.to_string()))?;
    autotune_with(&a, layer, candidates, runs, &mut WallClock)
}

/// Tunes with an explicit input and timer.
pub fn autotune_with(
    a: &DenseMatrix,
    layer: &PackedLinear,
    candidates: &[TileConfig],
    runs: usize,
    timer: &mut dyn Timer,
) -> Result<AutotuneResult, KernelError> {
    if candidates.is_empty() {
        return Err(KernelError::EmptyCandidates);
    }
    if runs < 3 {
        return Err(KernelError::InvalidRuns(runs));
    }
    if a.cols() != layer.in_features {
        return Err(KernelError::ShapeMismatch(format!(
            "A has {} columns, layer has {} inputs",
            a.cols(),
            layer.in_features
        )));
    }
    let mut table = Vec::new();
    let mut rejected = Vec::new();
    for cfg in candidates {
        if let Err(e) = cfg.validate(layer.bits) {
            rejected.push((*cfg, e.to_string()));
            continue;
        }
        let mut failure = None;
        let mut work = || {
            if let Err(e) = quant_matmul(a, layer, cfg) {
                failure = Some(e);
            }
            std::hint::black_box(());
        };
        work();
        let samples: Vec<u64> = (0..runs).map(|_| timer.time(cfg, &mut work)).collect();
        if let Some(e) = failure {
            return Err(e);
        }
        table.push((*cfg, median(samples)));
    }
    let best = table
        .iter()
        .min_by_key(|&&(_, t)| t)
        .map(|&(c, _)| c)
        .ok_or(KernelError::NoValidCandidates(candidates.len()))?;
    Ok(AutotuneResult { best, table, rejected })
}

/// A small sweep of square and skinny tiles at 1 and `max_workers` threads.
pub fn default_candidates(bits: u32, max_workers: usize) -> Vec<TileConfig> {
    let mut out = Vec::new();
    for &workers in &[1, max_workers.max(1)] {
        for &(bm, bd, bk) in &[(16, 32, 64), (32, 32, 32), (32, 64, 128), (64, 64, 64), (8, 128, 128)] {
            let c = TileConfig::new(bm, bd, bk, workers);
            if c.validate(bits).is_ok() && !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}
