//! Hessian-weighted sequential quantization with error feedback.
//!
//! Input rows are processed in natural order. Each row is snapped to its
//! group grid and the scaled residual is pushed into the rows that have not
//! been quantized yet through the upper Cholesky factor `U` of `H⁻¹`:
//!
//! ```text
//! e      = (w_i − dq(w_i)) / U[i][i]
//! w_j   -= e · U[i][j]          for j > i
//! ```
//!
//! Group parameters are fitted when the first row of a group is reached, on
//! the error-updated weights of that group.

use super::params::fit_scale_zero;
use super::{dequantize_scalar, quantize_scalar, GroupQuantParams, QuantConfig, QuantError, QuantizedMatrix};
use crate::linalg::inverse_upper_cholesky;
use crate::tensor::DenseMatrix;

/// Quantizes `w` (`I×O`) against the damped Hessian `h` (`I×I`).
pub fn gptq_quantize(w: &DenseMatrix, h: &DenseMatrix, cfg: &QuantConfig) -> Result<QuantizedMatrix, QuantError> {
    cfg.validate()?;
    let (rows, cols) = w.shape();
    if h.shape() != (rows, rows) {
        return Err(QuantError::DimensionMismatch(format!(
            "Hessian is {}x{}, weights have {rows} input rows",
            h.rows(),
            h.cols()
        )));
    }
    let h64: Vec<f64> = h.data().iter().map(|&v| f64::from(v)).collect();
    let u: Vec<f32> = inverse_upper_cholesky(&h64, rows)
        .ok_or(QuantError::CholeskyFailed)?
        .into_iter()
        .map(|v| v as f32)
        .collect();

    let group_rows = cfg.group_rows(rows);
    let num_groups = cfg.num_groups(rows);
    let max_code = cfg.max_code();
    let mut work = w.data().to_vec();
    let mut scales = vec![0.0f32; num_groups * cols];
    let mut zeros = vec![0u32; num_groups * cols];
    let mut qint = vec![0u32; rows * cols];
    let mut err = vec![0.0f32; cols];

    for i in 0..rows {
        let g = i / group_rows;
        if i % group_rows == 0 {
            let end = (i + group_rows).min(rows);
            for c in 0..cols {
                let (s, z) = fit_scale_zero((i..end).map(|r| work[r * cols + c]), cfg);
                scales[g * cols + c] = s;
                zeros[g * cols + c] = z;
            }
        }
        let d = u[i * rows + i];
        for c in 0..cols {
            let (s, z) = (scales[g * cols + c], zeros[g * cols + c]);
            let x = work[i * cols + c];
            let q = quantize_scalar(x, s, z, max_code);
            qint[i * cols + c] = q;
            err[c] = (x - dequantize_scalar(q, s, z)) / d;
        }
        for j in i + 1..rows {
            let uij = u[i * rows + j];
            if uij == 0.0 {
                continue;
            }
            let row = &mut work[j * cols..(j + 1) * cols];
            for (wv, &e) in row.iter_mut().zip(&err) {
                *wv -= e * uij;
            }
        }
    }

    let params = GroupQuantParams {
        scales,
        zeros,
        g_idx: GroupQuantParams::group_index(rows, group_rows),
        num_groups,
        out_features: cols,
    };
    QuantizedMatrix::new(qint, params, cfg.bits)
}
