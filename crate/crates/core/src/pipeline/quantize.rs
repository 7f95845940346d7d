//! Vision-first, then cross-modal, quantization with per-module calibration.
//!
//! Vision layers only ever see `calib_v`; cross-modal layers only ever see
//! `calib_m`. Within a module, layer `i` is calibrated on the activations
//! that the *unquantized* layers `0..i` produce from the module's captured
//! inputs. Inside a cross-modal layer the four groups are processed in
//! [`GroupKind::ORDER`]; every group derives its input from the same
//! original layer input, never from an already quantized group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GroupKind, ModuleKind, PipelineError, SyntheticModel};
use crate::calibration::{finalize_hessian, CalibrationSet, HessianAccumulator};
use crate::container::TensorMap;
use crate::pack::{pack_linear, PackedLinear, PackedSize};
use crate::quant::{dequantize_matrix, gptq_quantize, proxy_loss, rtn_quantize, QuantConfig, QuantizedMatrix};
use crate::tensor::DenseMatrix;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gptq,
    Rtn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub module: ModuleKind,
    pub layer_index: usize,
    pub group: Option<GroupKind>,
    pub in_features: usize,
    pub out_features: usize,
    /// Hessian-weighted loss of the chosen method, `trace(ΔᵀHΔ)/O`.
    pub proxy_loss: f64,
    /// Same loss for plain round-to-nearest on the same Hessian.
    pub rtn_proxy_loss: f64,
    pub bytes: PackedSize,
    /// SHA-256 of the calibration input entering the layer.
    pub calib_input_hash: String,
    /// SHA-256 of the activations the Hessian was built from.
    pub hessian_input_hash: String,
    pub hessian_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub schema_version: u32,
    pub method: Method,
    pub bits: u32,
    pub groupsize: i64,
    pub symmetric: bool,
    pub damp_ratio: f32,
    /// How cross-modal Hessians were formed.
    pub hessian_mode: String,
    /// Layers in the order they were quantized.
    pub layers: Vec<LayerReport>,
}

impl QuantReport {
    pub fn processing_order(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub layers: BTreeMap<String, PackedLinear>,
    pub report: QuantReport,
    /// Parameters kept in f16 (counted in size reports).
    pub unquantized_params: u64,
}

impl QuantizedCheckpoint {
    pub fn to_tensor_map(&self) -> Result<TensorMap, PipelineError> {
        let mut map = TensorMap::new();
        for (name, layer) in &self.layers {
            layer.write_tensors(&mut map, name)?;
        }
        map.set_metadata("kind", "checkpoint");
        map.set_metadata("bits", self.report.bits.to_string());
        map.set_metadata("groupsize", self.report.groupsize.to_string());
        map.set_metadata("unquantized_params", self.unquantized_params.to_string());
        map.set_metadata(
            "report",
            serde_json::to_string(&self.report).map_err(|e| PipelineError::Format(e.to_string()))?,
        );
        Ok(map)
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self, PipelineError> {
        if map.meta("kind") != Some("checkpoint") {
            return Err(PipelineError::Format("container is not a quantized checkpoint".into()));
        }
        let report: QuantReport = serde_json::from_str(
            map.meta("report")
                .ok_or_else(|| PipelineError::Format("checkpoint has no report".into()))?,
        )
        .map_err(|e| PipelineError::Format(format!("report: {e}")))?;
        let unquantized_params = map
            .meta("unquantized_params")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PipelineError::Format("missing unquantized_params".into()))?;
        let mut layers = BTreeMap::new();
        for l in &report.layers {
            layers.insert(l.name.clone(), PackedLinear::read_tensors(map, &l.name)?);
        }
        let expected = layers.len() * 4;
        if map.names().filter(|n| !n.ends_with("/bias")).count() != expected {
            return Err(PipelineError::Format(
                "checkpoint tensors disagree with its report".into(),
            ));
        }
        Ok(Self {
            layers,
            report,
            unquantized_params,
        })
    }
}

pub(crate) fn hash_matrices<'a>(ms: impl IntoIterator<Item = &'a DenseMatrix>) -> String {
    let mut h = Sha256::new();
    for m in ms {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        h.update(m.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Context<'a> {
    cfg: &'a QuantConfig,
    method: Method,
    out: QuantizedCheckpoint,
    on_layer: &'a mut dyn FnMut(&str),
}

struct Placement<'a> {
    name: &'a str,
    module: ModuleKind,
    layer_index: usize,
    group: Option<GroupKind>,
    calib_input_hash: &'a str,
}

impl Context<'_> {
    fn quantize_one(
        &mut self,
        at: Placement<'_>,
        weight: &DenseMatrix,
        hessian_inputs: &[DenseMatrix],
        hessian: &DenseMatrix,
        hessian_rows: usize,
    ) -> Result<(), PipelineError> {
        let wrap = |e: PipelineError| PipelineError::Layer {
            layer: at.name.to_string(),
            source: Box::new(e),
        };
        (self.on_layer)(at.name);
        let rtn = rtn_quantize(weight, self.cfg).map_err(|e| wrap(e.into()))?;
        let q: QuantizedMatrix = match self.method {
            Method::Gptq => gptq_quantize(weight, hessian, self.cfg).map_err(|e| wrap(e.into()))?,
            Method::Rtn => rtn.clone(),
        };
        let loss = proxy_loss(weight, &dequantize_matrix(&q), hessian).map_err(|e| wrap(e.into()))?;
        let rtn_loss = proxy_loss(weight, &dequantize_matrix(&rtn), hessian).map_err(|e| wrap(e.into()))?;
        let packed = pack_linear(&q, None, self.cfg.groupsize).map_err(|e| wrap(e.into()))?;
        self.out.report.layers.push(LayerReport {
            name: at.name.to_string(),
            module: at.module,
            layer_index: at.layer_index,
            group: at.group,
            in_features: weight.rows(),
            out_features: weight.cols(),
            proxy_loss: loss,
            rtn_proxy_loss: rtn_loss,
            bytes: packed.byte_sizes(),
            calib_input_hash: at.calib_input_hash.to_string(),
            hessian_input_hash: hash_matrices(hessian_inputs),
            hessian_rows,
        });
        self.out.layers.insert(at.name.to_string(), packed);
        Ok(())
    }
}

fn hessian_of(inputs: &[DenseMatrix], damp: f32) -> Result<(DenseMatrix, usize), PipelineError> {
    let mut acc = HessianAccumulator::new(inputs[0].cols());
    for x in inputs {
        acc.accumulate(x)?;
    }
    let rows = acc.sample_rows();
    Ok((finalize_hessian(&acc, damp)?, rows))
}

fn check_calibration(
    calib: Option<&CalibrationSet>,
    module: ModuleKind,
    dim: usize,
) -> Result<&CalibrationSet, PipelineError> {
    let c = calib.ok_or(PipelineError::MissingCalibration(module))?;
    if c.module != module {
        return Err(PipelineError::Format(format!(
            "calibration set captured for {}, expected {module}",
            c.module
        )));
    }
    if c.feature_dim() != dim {
        return Err(PipelineError::DimensionMismatch(format!(
            "{module} calibration has {} features, model expects {dim}",
            c.feature_dim()
        )));
    }
    Ok(c)
}

/// Quantizes every weight of `model`. A calibration set is only required
/// for a module that actually has layers.
pub fn quantize_model(
    model: &SyntheticModel,
    calib_v: Option<&CalibrationSet>,
    calib_m: Option<&CalibrationSet>,
    cfg: &QuantConfig,
    method: Method,
) -> Result<QuantizedCheckpoint, PipelineError> {
    quantize_model_logged(model, calib_v, calib_m, cfg, method, &mut |_| {})
}

/// [`quantize_model`] that calls `on_layer` with each weight's name right
/// before it is quantized.
pub fn quantize_model_logged(
    model: &SyntheticModel,
    calib_v: Option<&CalibrationSet>,
    calib_m: Option<&CalibrationSet>,
    cfg: &QuantConfig,
    method: Method,
    on_layer: &mut dyn FnMut(&str),
) -> Result<QuantizedCheckpoint, PipelineError> {
    cfg.validate()?;
    model.validate()?;
    let mut ctx = Context {
        cfg,
        method,
        out: QuantizedCheckpoint {
            layers: BTreeMap::new(),
            report: QuantReport {
                schema_version: REPORT_SCHEMA_VERSION,
                method,
                bits: cfg.bits,
                groupsize: cfg.groupsize,
                symmetric: cfg.symmetric,
                damp_ratio: cfg.damp_ratio,
                hessian_mode: "per-group: members of a component group share one Hessian built from the \
                               group's input activations; vision layers use their own input"
                    .into(),
                layers: Vec::new(),
            },
            unquantized_params: model.unquantized_param_count(),
        },
        on_layer,
    };

    if !model.vision_layers.is_empty() {
        let calib = check_calibration(calib_v, ModuleKind::Vision, model.vision_dim)?;
        let mut acts = calib.samples.clone();
        for (i, layer) in model.vision_layers.iter().enumerate() {
            let calib_hash = hash_matrices(&acts);
            let (h, rows) = hessian_of(&acts, cfg.damp_ratio)?;
            ctx.quantize_one(
                Placement {
                    name: &layer.name,
                    module: ModuleKind::Vision,
                    layer_index: i,
                    group: None,
                    calib_input_hash: &calib_hash,
                },
                &layer.weight,
                &acts,
                &h,
                rows,
            )?;
            acts = acts.iter().map(|x| x.matmul(&layer.weight)).collect::<Result<_, _>>()?;
        }
    }

    if !model.crossmodal_layers.is_empty() {
        let calib = check_calibration(calib_m, ModuleKind::CrossModal, model.crossmodal_dim)?;
        let mut acts = calib.samples.clone();
        for (j, layer) in model.crossmodal_layers.iter().enumerate() {
            let calib_hash = hash_matrices(&acts);
            let mut outputs = Vec::with_capacity(acts.len());
            let mut per_group: BTreeMap<GroupKind, Vec<DenseMatrix>> = BTreeMap::new();
            for x in &acts {
                let (out, inputs) = layer.forward(x)?;
                outputs.push(out);
                for kind in GroupKind::ORDER {
                    per_group.entry(kind).or_default().push(inputs.get(kind).clone());
                }
            }
            for group in &layer.groups {
                let inputs = &per_group[&group.kind];
                let (h, rows) = hessian_of(inputs, cfg.damp_ratio)?;
                for member in &group.members {
                    ctx.quantize_one(
                        Placement {
                            name: &member.name,
                            module: ModuleKind::CrossModal,
                            layer_index: j,
                            group: Some(group.kind),
                            calib_input_hash: &calib_hash,
                        },
                        &member.weight,
                        inputs,
                        &h,
                        rows,
                    )?;
                }
            }
            acts = outputs;
        }
    }
    Ok(ctx.out)
}
