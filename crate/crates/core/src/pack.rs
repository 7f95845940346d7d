//! N-bit codes packed into 32-bit words.
//!
//! With `f_int = 32 / N` lanes per word:
//!
//! * `qweight` packs `f_int` consecutive input rows of one output column
//!   into a word; row `j` lands in lane `j mod f_int`, i.e. at bit offset
//!   `N·(j mod f_int)`. Shape `(I / f_int) × O`.
//! * `qzeros` packs consecutive output columns of one group along the O
//!   axis, `G × ⌈O·N / 32⌉` words, unused high lanes of the last word zero.
//! * `scales` are f16 `G × O`, `g_idx` is i32 of length `I`.
//!
//! Lane 0 occupies the least significant bits.

use half::f16;
use thiserror::Error;

use crate::container::{ContainerError, Tensor, TensorData, TensorMap};
use crate::quant::{validate_bits, GroupQuantParams, QuantError, QuantizedMatrix};
use crate::tensor::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackError {
    #[error("unsupported bit width {0} (expected 2, 4 or 8)")]
    InvalidBits(u32),
    #[error("{rows} input rows is not a multiple of {lanes} lanes per word")]
    NotDivisible { rows: usize, lanes: usize },
    #[error("value {value} does not fit in {bits} bits")]
    ValueOutOfRange { value: u32, bits: u32 },
    #[error("lane {lane} out of range for {lanes} lanes")]
    LaneOutOfRange { lane: usize, lanes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("scale {0} overflows f16")]
    ScaleOverflow(f32),
}

impl From<QuantError> for PackError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::InvalidBits(b) => PackError::InvalidBits(b),
            other => PackError::ShapeMismatch(other.to_string()),
        }
    }
}

/// `f_int = 32 / N`.
pub fn lanes_per_word(bits: u32) -> Result<usize, PackError> {
    validate_bits(bits)?;
    Ok((32 / bits) as usize)
}

#[inline]
fn mask(bits: u32) -> u32 {
    if bits == 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

fn check_values(values: &[u32], bits: u32) -> Result<(), PackError> {
    let max = mask(bits);
    match values.iter().find(|&&v| v > max) {
        Some(&value) => Err(PackError::ValueOutOfRange { value, bits }),
        None => Ok(()),
    }
}

/// Packs an `I×O` row-major code grid along the input axis.
pub fn pack_weights(qint: &[u32], rows: usize, cols: usize, bits: u32) -> Result<Vec<u32>, PackError> {
    let lanes = lanes_per_word(bits)?;
    if qint.len() != rows * cols {
        return Err(PackError::ShapeMismatch(format!(
            "{} codes for {rows}x{cols}",
            qint.len()
        )));
    }
    if !rows.is_multiple_of(lanes) {
        return Err(PackError::NotDivisible { rows, lanes });
    }
    check_values(qint, bits)?;
    let mut words = vec![0u32; rows / lanes * cols];
    for (j, row) in qint.chunks_exact(cols.max(1)).enumerate().take(rows) {
        let (wr, lane) = (j / lanes, j % lanes);
        let shift = bits * lane as u32;
        for (c, &v) in row.iter().enumerate() {
            words[wr * cols + c] |= v << shift;
        }
    }
    Ok(words)
}

/// Inverse of [`pack_weights`].
pub fn unpack_weights(words: &[u32], rows: usize, cols: usize, bits: u32) -> Result<Vec<u32>, PackError> {
    let lanes = lanes_per_word(bits)?;
    if !rows.is_multiple_of(lanes) || words.len() != rows / lanes * cols {
        return Err(PackError::ShapeMismatch(format!(
            "{} words for {rows}x{cols}",
            words.len()
        )));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for j in 0..rows {
        let (wr, lane) = (j / lanes, j % lanes);
        for c in 0..cols {
            out.push(unpack_value(words[wr * cols + c], lane, bits)?);
        }
    }
    Ok(out)
}

/// Words per packed zero-point row, `⌈O·N / 32⌉`.
pub fn zero_words_per_row(cols: usize, bits: u32) -> usize {
    (cols * bits as usize).div_ceil(32)
}

/// Packs a `G×O` zero-point grid along the output axis.
pub fn pack_zeros(zeros: &[u32], groups: usize, cols: usize, bits: u32) -> Result<Vec<u32>, PackError> {
    let lanes = lanes_per_word(bits)?;
    if zeros.len() != groups * cols {
        return Err(PackError::ShapeMismatch(format!(
            "{} zeros for {groups}x{cols}",
            zeros.len()
        )));
    }
    check_values(zeros, bits)?;
    let per_row = zero_words_per_row(cols, bits);
    let mut words = vec![0u32; groups * per_row];
    for g in 0..groups {
        for j in 0..cols {
            let shift = bits * (j % lanes) as u32;
            words[g * per_row + j / lanes] |= zeros[g * cols + j] << shift;
        }
    }
    Ok(words)
}

/// Inverse of [`pack_zeros`].
pub fn unpack_zeros(words: &[u32], groups: usize, cols: usize, bits: u32) -> Result<Vec<u32>, PackError> {
    let lanes = lanes_per_word(bits)?;
    let per_row = zero_words_per_row(cols, bits);
    if words.len() != groups * per_row {
        return Err(PackError::ShapeMismatch(format!(
            "{} zero words for {groups}x{cols}",
            words.len()
        )));
    }
    let mut out = Vec::with_capacity(groups * cols);
    for g in 0..groups {
        for j in 0..cols {
            out.push(unpack_value(words[g * per_row + j / lanes], j % lanes, bits)?);
        }
    }
    Ok(out)
}

/// `(word >> (lane·N)) & (2^N − 1)`.
#[inline]
pub fn unpack_value(word: u32, lane: usize, bits: u32) -> Result<u32, PackError> {
    let lanes = lanes_per_word(bits)?;
    if lane >= lanes {
        return Err(PackError::LaneOutOfRange { lane, lanes });
    }
    Ok(unpack_lane(word, lane, bits))
}

/// Unchecked form of [`unpack_value`] for the kernel hot path.
#[inline(always)]
pub(crate) fn unpack_lane(word: u32, lane: usize, bits: u32) -> u32 {
    (word >> (lane as u32 * bits)) & mask(bits)
}

/// A quantized linear layer in packed storage form.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLinear {
    pub qweight: Vec<u32>,
    pub scales: Vec<f16>,
    pub qzeros: Vec<u32>,
    pub g_idx: Vec<i32>,
    pub bias: Option<Vec<f32>>,
    pub bits: u32,
    pub in_features: usize,
    pub out_features: usize,
    pub num_groups: usize,
    /// Rows per group as configured (`-1` for a single group).
    pub groupsize: i64,
}

fn scale_to_f16(s: f32) -> Result<f16, PackError> {
    let h = f16::from_f32(s);
    if h.is_infinite() {
        return Err(PackError::ScaleOverflow(s));
    }
    // keep scales strictly positive below the f16 subnormal range
    Ok(h.max(f16::from_bits(1)))
}

/// Packs a quantized matrix (and optional length-`O` bias).
pub fn pack_linear(q: &QuantizedMatrix, bias: Option<Vec<f32>>, groupsize: i64) -> Result<PackedLinear, PackError> {
    q.validate()?;
    let (rows, cols) = (q.in_features(), q.out_features());
    if let Some(b) = &bias {
        if b.len() != cols {
            return Err(PackError::ShapeMismatch(format!(
                "bias has {} entries, layer has {cols} outputs",
                b.len()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(PackError::ShapeMismatch("bias must be finite".into()));
        }
    }
    let p = &q.params;
    Ok(PackedLinear {
        qweight: pack_weights(&q.qint, rows, cols, q.bits)?,
        scales: p.scales.iter().map(|&s| scale_to_f16(s)).collect::<Result<_, _>>()?,
        qzeros: pack_zeros(&p.zeros, p.num_groups, cols, q.bits)?,
        g_idx: p.g_idx.iter().map(|&g| g as i32).collect(),
        bias,
        bits: q.bits,
        in_features: rows,
        out_features: cols,
        num_groups: p.num_groups,
        groupsize,
    })
}

impl PackedLinear {
    pub fn lanes(&self) -> usize {
        (32 / self.bits) as usize
    }

    pub fn zero_words_per_row(&self) -> usize {
        zero_words_per_row(self.out_features, self.bits)
    }

    #[inline]
    pub fn code(&self, row: usize, col: usize) -> u32 {
        let lanes = self.lanes();
        unpack_lane(
            self.qweight[(row / lanes) * self.out_features + col],
            row % lanes,
            self.bits,
        )
    }

    #[inline]
    pub fn zero(&self, group: usize, col: usize) -> u32 {
        let lanes = self.lanes();
        unpack_lane(
            self.qzeros[group * self.zero_words_per_row() + col / lanes],
            col % lanes,
            self.bits,
        )
    }

    #[inline]
    pub fn scale(&self, group: usize, col: usize) -> f32 {
        self.scales[group * self.out_features + col].to_f32()
    }

    pub fn validate(&self) -> Result<(), PackError> {
        let lanes = lanes_per_word(self.bits)?;
        let (i, o, g) = (self.in_features, self.out_features, self.num_groups);
        if i % lanes != 0 {
            return Err(PackError::NotDivisible { rows: i, lanes });
        }
        let ok = self.qweight.len() == i / lanes * o
            && self.scales.len() == g * o
            && self.qzeros.len() == g * self.zero_words_per_row()
            && self.g_idx.len() == i
            && self.bias.as_ref().is_none_or(|b| b.len() == o);
        if !ok {
            return Err(PackError::ShapeMismatch(
                "packed tensor sizes disagree with dimensions".into(),
            ));
        }
        if self.g_idx.iter().any(|&x| x < 0 || x as usize >= g) || self.g_idx.windows(2).any(|w| w[0] > w[1]) {
            return Err(PackError::ShapeMismatch(
                "g_idx must be nondecreasing and in range".into(),
            ));
        }
        if self
            .scales
            .iter()
            .any(|s| s.is_nan() || s.to_f32() <= 0.0 || s.is_infinite())
        {
            return Err(PackError::ShapeMismatch("scales must be positive and finite".into()));
        }
        // padding lanes of the last zero word must be clear
        let used = o % lanes;
        if used != 0 {
            let per_row = self.zero_words_per_row();
            for row in 0..g {
                if self.qzeros[row * per_row + per_row - 1] >> (used as u32 * self.bits) != 0 {
                    return Err(PackError::ShapeMismatch("nonzero padding lanes in qzeros".into()));
                }
            }
        }
        Ok(())
    }

    pub fn unpack_qint(&self) -> Result<Vec<u32>, PackError> {
        unpack_weights(&self.qweight, self.in_features, self.out_features, self.bits)
    }

    /// Recovers the logical quantized matrix (scales widened from f16).
    pub fn to_quantized(&self) -> Result<QuantizedMatrix, PackError> {
        let params = GroupQuantParams {
            scales: self.scales.iter().map(|s| s.to_f32()).collect(),
            zeros: unpack_zeros(&self.qzeros, self.num_groups, self.out_features, self.bits)?,
            g_idx: self.g_idx.iter().map(|&g| g as u32).collect(),
            num_groups: self.num_groups,
            out_features: self.out_features,
        };
        Ok(QuantizedMatrix::new(self.unpack_qint()?, params, self.bits)?)
    }

    /// Dense `I×O` weights, `(code − zero) × scale` per element.
    pub fn dequantize(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.in_features, self.out_features, |r, c| {
            let g = self.g_idx[r] as usize;
            (self.code(r, c) as f32 - self.zero(g, c) as f32) * self.scale(g, c)
        })
    }

    /// Actual storage bytes of each packed tensor.
    pub fn byte_sizes(&self) -> PackedSize {
        let qweight = self.qweight.len() as u64 * 4;
        let scales = self.scales.len() as u64 * 2;
        let qzeros = self.qzeros.len() as u64 * 4;
        let g_idx = self.g_idx.len() as u64 * 4;
        let total = qweight + scales + qzeros + g_idx;
        PackedSize {
            qweight,
            scales,
            qzeros,
            g_idx,
            total,
            ratio_vs_f16: total as f64 / (self.in_features as f64 * self.out_features as f64 * 2.0),
        }
    }

    pub fn write_tensors(&self, map: &mut TensorMap, layer: &str) -> Result<(), ContainerError> {
        let t = |shape: Vec<usize>, data| Tensor::new(shape, data).expect("consistent shape");
        let (i, o) = (self.in_features, self.out_features);
        map.insert(
            format!("{layer}/qweight"),
            t(vec![i / self.lanes(), o], TensorData::U32(self.qweight.clone()))
                .with_attr("bits", self.bits)
                .with_attr("groupsize", self.groupsize)
                .with_attr("in_features", i as u64)
                .with_attr("out_features", o as u64),
        )?;
        map.insert(
            format!("{layer}/scales"),
            t(vec![self.num_groups, o], TensorData::F16(self.scales.clone())),
        )?;
        map.insert(
            format!("{layer}/qzeros"),
            t(
                vec![self.num_groups, self.zero_words_per_row()],
                TensorData::U32(self.qzeros.clone()),
            ),
        )?;
        map.insert(
            format!("{layer}/g_idx"),
            t(vec![i], TensorData::I32(self.g_idx.clone())),
        )?;
        if let Some(b) = &self.bias {
            map.insert(format!("{layer}/bias"), t(vec![o], TensorData::F32(b.clone())))?;
        }
        Ok(())
    }

    pub fn read_tensors(map: &TensorMap, layer: &str) -> Result<Self, ContainerError> {
        let invalid = |reason: String| ContainerError::InvalidTensor {
            name: layer.to_string(),
            reason,
        };
        let qw = map.require(&format!("{layer}/qweight"))?;
        let attr = |key: &str| {
            qw.attr(key)
                .and_then(|v| v.as_i64())
                .ok_or_else(|| invalid(format!("missing attribute {key}")))
        };
        let bits = attr("bits")? as u32;
        let groupsize = attr("groupsize")?;
        let in_features = attr("in_features")? as usize;
        let out_features = attr("out_features")? as usize;
        let TensorData::U32(qweight) = qw.data() else {
            return Err(invalid("qweight must be u32".into()));
        };
        let scales_t = map.require(&format!("{layer}/scales"))?;
        let TensorData::F16(scales) = scales_t.data() else {
            return Err(invalid("scales must be f16".into()));
        };
        let TensorData::U32(qzeros) = map.require(&format!("{layer}/qzeros"))?.data() else {
            return Err(invalid("qzeros must be u32".into()));
        };
        let TensorData::I32(g_idx) = map.require(&format!("{layer}/g_idx"))?.data() else {
            return Err(invalid("g_idx must be i32".into()));
        };
        let bias = match map.get(&format!("{layer}/bias")) {
            Some(t) => match t.data() {
                TensorData::F32(b) => Some(b.clone()),
                _ => return Err(invalid("bias must be f32".into())),
            },
            None => None,
        };
        let packed = PackedLinear {
            qweight: qweight.clone(),
            scales: scales.clone(),
            qzeros: qzeros.clone(),
            g_idx: g_idx.clone(),
            bias,
            bits,
            in_features,
            out_features,
            num_groups: scales_t.shape()[0],
            groupsize,
        };
        packed.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(packed)
    }
}

/// Byte counts of the packed tensors and the ratio against an f16 matrix.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PackedSize {
    pub qweight: u64,
    pub scales: u64,
    pub qzeros: u64,
    pub g_idx: u64,
    pub total: u64,
    pub ratio_vs_f16: f64,
}

/// Analytic storage size of an `I×O` layer packed at `bits` with
/// `groupsize` rows per group (`-1` for one group).
pub fn estimate_packed_size(
    in_features: usize,
    out_features: usize,
    bits: u32,
    groupsize: i64,
) -> Result<PackedSize, PackError> {
    let lanes = lanes_per_word(bits)?;
    if !in_features.is_multiple_of(lanes) {
        return Err(PackError::NotDivisible {
            rows: in_features,
            lanes,
        });
    }
    let groups = match groupsize {
        -1 => 1,
        g if g > 0 => in_features.div_ceil(g as usize) as u64,
        g => return Err(PackError::ShapeMismatch(format!("invalid groupsize {g}"))),
    };
    let (i, o) = (in_features as u64, out_features as u64);
    let qweight = i / lanes as u64 * o * 4;
    let scales = groups * o * 2;
    let qzeros = groups * zero_words_per_row(out_features, bits) as u64 * 4;
    let g_idx = i * 4;
    let total = qweight + scales + qzeros + g_idx;
    Ok(PackedSize {
        qweight,
        scales,
        qzeros,
        g_idx,
        total,
        ratio_vs_f16: total as f64 / (i as f64 * o as f64 * 2.0),
    })
}
