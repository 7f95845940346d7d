use half::f16;

use super::{
    compute_group_params, dequantize_scalar, quantize_scalar, validate_bits, GroupQuantParams, QuantConfig, QuantError,
};
use crate::container::{ContainerError, Tensor, TensorData, TensorMap};
use crate::tensor::DenseMatrix;

/// Integer codes for an `I×O` matrix together with their group parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub qint: Vec<u32>,
    pub params: GroupQuantParams,
    pub bits: u32,
}

impl QuantizedMatrix {
    pub fn new(qint: Vec<u32>, params: GroupQuantParams, bits: u32) -> Result<Self, QuantError> {
        let q = Self { qint, params, bits };
        q.validate()?;
        Ok(q)
    }

    pub fn in_features(&self) -> usize {
        self.params.in_features()
    }

    pub fn out_features(&self) -> usize {
        self.params.out_features
    }

    #[inline]
    pub fn code(&self, row: usize, col: usize) -> u32 {
        self.qint[row * self.params.out_features + col]
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        validate_bits(self.bits)?;
        self.params.validate(self.bits)?;
        if self.qint.len() != self.in_features() * self.out_features() {
            return Err(QuantError::Invalid("qint length".into()));
        }
        let max_code = (1u32 << self.bits) - 1;
        if self.qint.iter().any(|&q| q > max_code) {
            return Err(QuantError::Invalid(format!("code above {max_code}")));
        }
        Ok(())
    }

    /// Writes `qint` (u32), `scales` (f16), `zeros` (u32) and `g_idx` (i32)
    /// under `prefix/`.
    pub fn write_tensors(&self, map: &mut TensorMap, prefix: &str) -> Result<(), ContainerError> {
        let (rows, cols, groups) = (self.in_features(), self.out_features(), self.params.num_groups);
        let t = |shape: Vec<usize>, data| Tensor::new(shape, data).expect("consistent shape");
        map.insert(
            format!("{prefix}/qint"),
            t(vec![rows, cols], TensorData::U32(self.qint.clone())).with_attr("bits", self.bits),
        )?;
        map.insert(
            format!("{prefix}/scales"),
            t(
                vec![groups, cols],
                TensorData::F16(self.params.scales.iter().map(|&s| f16::from_f32(s)).collect()),
            ),
        )?;
        map.insert(
            format!("{prefix}/zeros"),
            t(vec![groups, cols], TensorData::U32(self.params.zeros.clone())),
        )?;
        map.insert(
            format!("{prefix}/g_idx"),
            t(
                vec![rows],
                TensorData::I32(self.params.g_idx.iter().map(|&g| g as i32).collect()),
            ),
        )?;
        Ok(())
    }

    /// Inverse of [`write_tensors`](Self::write_tensors); scales come back
    /// rounded through f16.
    pub fn read_tensors(map: &TensorMap, prefix: &str) -> Result<Self, ContainerError> {
        let invalid = |reason: String| ContainerError::InvalidTensor {
            name: prefix.to_string(),
            reason,
        };
        let qint_t = map.require(&format!("{prefix}/qint"))?;
        let bits = qint_t
            .attr("bits")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| invalid("missing bits attribute".into()))? as u32;
        let &[rows, cols] = qint_t.shape() else {
            return Err(invalid("qint must be 2-D".into()));
        };
        let TensorData::U32(qint) = qint_t.data() else {
            return Err(invalid("qint must be u32".into()));
        };
        let scales_t = map.require(&format!("{prefix}/scales"))?;
        let TensorData::F16(scales) = scales_t.data() else {
            return Err(invalid("scales must be f16".into()));
        };
        let TensorData::U32(zeros) = map.require(&format!("{prefix}/zeros"))?.data() else {
            return Err(invalid("zeros must be u32".into()));
        };
        let TensorData::I32(g_idx) = map.require(&format!("{prefix}/g_idx"))?.data() else {
            return Err(invalid("g_idx must be i32".into()));
        };
        if g_idx.len() != rows {
            return Err(invalid("g_idx length".into()));
        }
        let params = GroupQuantParams {
            scales: scales.iter().map(|s| s.to_f32()).collect(),
            zeros: zeros.clone(),
            g_idx: g_idx.iter().map(|&g| g.max(0) as u32).collect(),
            num_groups: scales_t.shape()[0],
            out_features: cols,
        };
        QuantizedMatrix::new(qint.clone(), params, bits).map_err(|e| invalid(e.to_string()))
    }
}

/// Quantizes `w` onto an existing grid: `clamp(round(w/s) + z, 0, 2^N−1)`.
pub fn quantize_with_params(
    w: &DenseMatrix,
    params: &GroupQuantParams,
    bits: u32,
) -> Result<QuantizedMatrix, QuantError> {
    validate_bits(bits)?;
    let (rows, cols) = w.shape();
    if rows != params.in_features() || cols != params.out_features {
        return Err(QuantError::DimensionMismatch(format!(
            "weights {rows}x{cols} vs params {}x{}",
            params.in_features(),
            params.out_features
        )));
    }
    let max_code = (1u32 << bits) - 1;
    let mut qint = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let g = params.g_idx[r] as usize;
        for c in 0..cols {
            qint.push(quantize_scalar(
                w.get(r, c),
                params.scale(g, c),
                params.zero(g, c),
                max_code,
            ));
        }
    }
    QuantizedMatrix::new(qint, params.clone(), bits)
}

/// Round-to-nearest baseline: fit group parameters, then snap every weight
/// independently.
pub fn rtn_quantize(w: &DenseMatrix, cfg: &QuantConfig) -> Result<QuantizedMatrix, QuantError> {
    cfg.validate()?;
    let params = compute_group_params(w, cfg);
    quantize_with_params(w, &params, cfg.bits)
}

/// `out[i][o] = (qint[i][o] − zeros[g_idx[i]][o]) × scales[g_idx[i]][o]`.
pub fn dequantize_matrix(q: &QuantizedMatrix) -> DenseMatrix {
    let (rows, cols) = (q.in_features(), q.out_features());
    let p = &q.params;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let g = p.g_idx[r] as usize;
        for c in 0..cols {
            data.push(dequantize_scalar(q.code(r, c), p.scale(g, c), p.zero(g, c)));
        }
    }
    DenseMatrix::new(rows, cols, data).expect("dequantized values are finite")
}

/// Hessian-weighted reconstruction error `trace(ΔᵀHΔ) / O`, `Δ = w − dq`.
pub fn proxy_loss(w: &DenseMatrix, dq: &DenseMatrix, h: &DenseMatrix) -> Result<f64, QuantError> {
    let (rows, cols) = w.shape();
    if dq.shape() != (rows, cols) || h.shape() != (rows, rows) {
        return Err(QuantError::DimensionMismatch(format!(
            "w {rows}x{cols}, dq {:?}, H {:?}",
            dq.shape(),
            h.shape()
        )));
    }
    let delta: Vec<f64> = w
        .data()
        .iter()
        .zip(dq.data())
        .map(|(&a, &b)| f64::from(a) - f64::from(b))
        .collect();
    let mut total = 0.0f64;
    for a in 0..rows {
        for b in 0..rows {
            let hab = f64::from(h.get(a, b));
            if hab == 0.0 {
                continue;
            }
            let dot: f64 = (0..cols).map(|o| delta[a * cols + o] * delta[b * cols + o]).sum();
            total += hab * dot;
        }
    }
    Ok(total / cols as f64)
}
