use serde::{Deserialize, Serialize};

use super::{PipelineError, QuantizedCheckpoint};
use crate::pack::{estimate_packed_size, PackedSize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSize {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bytes: PackedSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub bits: u32,
    pub groupsize: i64,
    pub layers: Vec<LayerSize>,
    /// Packed bytes of all quantized layers.
    pub quantized_bytes: u64,
    /// Unquantized parameters kept at f16.
    pub misc_bytes: u64,
    pub total: u64,
    /// Bytes of the same model with every parameter in f16 (or f32).
    pub baseline_bytes: u64,
    pub baseline_dtype: String,
    pub ratio: f64,
    /// Quantized bytes over the same layers at the baseline dtype.
    pub quantized_ratio: f64,
}

/// Size of a quantized checkpoint against its unquantized baseline.
pub fn size_report(ckpt: &QuantizedCheckpoint, f16_baseline: bool) -> Result<SizeReport, PipelineError> {
    let shapes: Vec<_> = ckpt
        .report
        .layers
        .iter()
        .map(|l| (l.name.clone(), l.in_features, l.out_features))
        .collect();
    size_report_for_shapes(
        &shapes,
        ckpt.report.bits,
        ckpt.report.groupsize,
        ckpt.unquantized_params,
        f16_baseline,
    )
}

/// Analytic size report for `(name, in, out)` layer shapes; nothing needs
/// to be quantized.
pub fn size_report_for_shapes(
    shapes: &[(String, usize, usize)],
    bits: u32,
    groupsize: i64,
    misc_params: u64,
    f16_baseline: bool,
) -> Result<SizeReport, PipelineError> {
    if shapes.is_empty() {
        return Err(PipelineError::Invalid("size report needs at least one layer".into()));
    }
    let base_width = if f16_baseline { 2 } else { 4 };
    let mut layers = Vec::with_capacity(shapes.len());
    let mut quantized_bytes = 0u64;
    let mut quantized_params = 0u64;
    for (name, i, o) in shapes {
        let bytes = estimate_packed_size(*i, *o, bits, groupsize)?;
        quantized_bytes += bytes.total;
        quantized_params += (*i * *o) as u64;
        layers.push(LayerSize {
            name: name.clone(),
            in_features: *i,
            out_features: *o,
            bytes,
        });
    }
    let misc_bytes = misc_params * 2;
    let total = quantized_bytes + misc_bytes;
    let baseline_bytes = (quantized_params + misc_params) * base_width;
    Ok(SizeReport {
        bits,
        groupsize,
        layers,
        quantized_bytes,
        misc_bytes,
        total,
        baseline_bytes,
        baseline_dtype: if f16_baseline { "f16" } else { "f32" }.into(),
        ratio: total as f64 / baseline_bytes as f64,
        quantized_ratio: quantized_bytes as f64 / (quantized_params * base_width) as f64,
    })
}
