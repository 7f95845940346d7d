use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use super::span::{SpanId, SpanRecorder};
use super::{KernelError, TileConfig};
use crate::pack::{unpack_lane, unpack_zeros, PackedLinear};
use crate::tensor::DenseMatrix;

/// Naive `a × w (+ bias)` with k-inner `f32` accumulation.
pub fn reference_matmul(a: &DenseMatrix, w: &DenseMatrix, bias: Option<&[f32]>) -> Result<DenseMatrix, KernelError> {
    let (m, k) = a.shape();
    let (kw, d) = w.shape();
    if k != kw {
        return Err(KernelError::ShapeMismatch(format!("A is {m}x{k}, W is {kw}x{d}")));
    }
    if bias.is_some_and(|b| b.len() != d) {
        return Err(KernelError::ShapeMismatch(format!("bias length differs from {d}")));
    }
    let mut out = vec![0.0f32; m * d];
    for i in 0..m {
        for j in 0..d {
            let mut acc = 0.0f32;
            for kk in 0..k {
                acc += a.get(i, kk) * w.get(kk, j);
            }
            out[i * d + j] = match bias {
                Some(b) => acc + b[j],
                None => acc,
            };
        }
    }
    DenseMatrix::new(m, d, out).map_err(|e| KernelError::ShapeMismatch(e.to_string()))
}

#[derive(Debug, Clone, Copy)]
struct Tile {
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
}

/// Read-only state shared by every tile of one call.
struct Problem<'a> {
    a: &'a DenseMatrix,
    layer: &'a PackedLinear,
    scales: Vec<f32>,
    zeros: Vec<u32>,
    cfg: TileConfig,
}

impl Problem<'_> {
    fn k(&self) -> usize {
        self.a.cols()
    }

    fn d(&self) -> usize {
        self.layer.out_features
    }

    /// Dequantizes rows `k0..k1`, columns of `tile` into `scratch`
    /// (row-major, `tile.cols` wide).
    fn dequant_slab(&self, tile: Tile, k0: usize, k1: usize, scratch: &mut [f32]) {
        let l = self.layer;
        let (d, lanes, bits) = (self.d(), l.lanes(), l.bits);
        for k in k0..k1 {
            let g = l.g_idx[k] as usize;
            let words = &l.qweight[(k / lanes) * d + tile.col0..][..tile.cols];
            let zeros = &self.zeros[g * d + tile.col0..][..tile.cols];
            let scales = &self.scales[g * d + tile.col0..][..tile.cols];
            let out = &mut scratch[(k - k0) * tile.cols..][..tile.cols];
            let lane = k % lanes;
            for (((o, &w), &z), &s) in out.iter_mut().zip(words).zip(zeros).zip(scales) {
                *o = (unpack_lane(w, lane, bits) as f32 - z as f32) * s;
            }
        }
    }

    fn compute_tile(&self, tile: Tile, mut trace: Option<(&mut SpanRecorder, SpanId)>) -> Vec<f32> {
        let mut acc = vec![0.0f32; tile.rows * tile.cols];
        let mut scratch = vec![0.0f32; self.cfg.block_k * tile.cols];
        let k = self.k();
        let mut k0 = 0;
        while k0 < k {
            let k1 = (k0 + self.cfg.block_k).min(k);
            match trace.as_mut() {
                Some((rec, id)) => {
                    rec.with_span("dequant", Some(*id), |_, _| {
                        self.dequant_slab(tile, k0, k1, &mut scratch)
                    });
                }
                None => self.dequant_slab(tile, k0, k1, &mut scratch),
            }
            for i in 0..tile.rows {
                let a_row = &self.a.row(tile.row0 + i)[k0..k1];
                let acc_row = &mut acc[i * tile.cols..(i + 1) * tile.cols];
                for (kk, &av) in a_row.iter().enumerate() {
                    let b_row = &scratch[kk * tile.cols..(kk + 1) * tile.cols];
                    for (c, &b) in acc_row.iter_mut().zip(b_row) {
                        *c += av * b;
                    }
                }
            }
            k0 = k1;
        }
        acc
    }

    fn run_tile(&self, tile: Tile, rec: Option<&mut SpanRecorder>) -> Vec<f32> {
        match rec {
            Some(rec) => {
                rec.with_span("tile", None, |rec, id| self.compute_tile(tile, Some((rec, id))))
                    .0
            }
            None => self.compute_tile(tile, None),
        }
    }
}

/// `A × dequant(L) + bias` without tracing.
pub fn quant_matmul(a: &DenseMatrix, layer: &PackedLinear, cfg: &TileConfig) -> Result<DenseMatrix, KernelError> {
    quant_matmul_traced(a, layer, cfg, None)
}

/// [`quant_matmul`] that records a `forward → {tile → dequant…, bias_add}`
/// span tree into `recorder` when one is given. Results are identical with
/// and without tracing.
pub fn quant_matmul_traced(
    a: &DenseMatrix,
    layer: &PackedLinear,
    cfg: &TileConfig,
    recorder: Option<&mut SpanRecorder>,
) -> Result<DenseMatrix, KernelError> {
    cfg.validate(layer.bits)?;
    if a.cols() != layer.in_features {
        return Err(KernelError::ShapeMismatch(format!(
            "A has {} columns, layer has {} inputs",
            a.cols(),
            layer.in_features
        )));
    }
    if !layer.in_features.is_multiple_of(layer.lanes()) {
        return Err(KernelError::ShapeMismatch(
            "K is not a multiple of the word lane count".into(),
        ));
    }
    let zeros = unpack_zeros(&layer.qzeros, layer.num_groups, layer.out_features, layer.bits)
        .map_err(|e| KernelError::ShapeMismatch(e.to_string()))?;
    let problem = Problem {
        a,
        layer,
        scales: layer.scales.iter().map(|s| s.to_f32()).collect(),
        zeros,
        cfg: *cfg,
    };
    match recorder {
        Some(rec) => {
            rec.with_span("forward", None, |rec, id| run(&problem, Some((rec, id))))
                .0
        }
        None => run(&problem, None),
    }
}

fn run(p: &Problem<'_>, mut trace: Option<(&mut SpanRecorder, SpanId)>) -> Result<DenseMatrix, KernelError> {
    let (m, d) = (p.a.rows(), p.d());
    let mut tiles = Vec::new();
    for row0 in (0..m).step_by(p.cfg.block_m) {
        for col0 in (0..d).step_by(p.cfg.block_d) {
            tiles.push(Tile {
                row0,
                rows: p.cfg.block_m.min(m - row0),
                col0,
                cols: p.cfg.block_d.min(d - col0),
            });
        }
    }

    let workers = p.cfg.workers.min(tiles.len()).max(1);
    let base = trace.as_ref().map(|(rec, _)| rec.fork());
    let mut results: Vec<(usize, Vec<f32>)> = Vec::with_capacity(tiles.len());
    let mut forks = Vec::with_capacity(workers);

    if workers == 1 {
        let mut rec = base;
        for (idx, &tile) in tiles.iter().enumerate() {
            results.push((idx, p.run_tile(tile, rec.as_mut())));
        }
        forks.extend(rec);
    } else {
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    let mut rec = base.as_ref().map(SpanRecorder::fork);
                    let (next, tiles) = (&next, &tiles);
                    s.spawn(move || {
                        let mut done = Vec::new();
                        loop {
                            let idx = next.fetch_add(1, Ordering::Relaxed);
                            let Some(&tile) = tiles.get(idx) else { break };
                            done.push((idx, p.run_tile(tile, rec.as_mut())));
                        }
                        (done, rec)
                    })
                })
                .collect();
            for h in handles {
                let (done, rec) = h.join().expect("tile worker panicked");
                results.extend(done);
                forks.extend(rec);
            }
        });
    }

    let mut out = vec![0.0f32; m * d];
    for (idx, acc) in results {
        let t = tiles[idx];
        for i in 0..t.rows {
            let dst = (t.row0 + i) * d + t.col0;
            out[dst..dst + t.cols].copy_from_slice(&acc[i * t.cols..(i + 1) * t.cols]);
        }
    }
    if let Some((rec, id)) = trace.as_mut() {
        for f in forks {
            rec.merge(f, Some(*id));
        }
    }

    if let Some(bias) = &p.layer.bias {
        let add = |out: &mut Vec<f32>| {
            for row in out.chunks_exact_mut(d) {
                for (o, &b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
        };
        match trace.as_mut() {
            Some((rec, id)) => {
                rec.with_span("bias_add", Some(*id), |_, _| add(&mut out));
            }
            None => add(&mut out),
        }
    }
    DenseMatrix::new(m, d, out).map_err(|e| KernelError::ShapeMismatch(e.to_string()))
}
