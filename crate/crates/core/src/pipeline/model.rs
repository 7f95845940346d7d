//! Synthetic two-module models standing in for a vision-language network.
//!
//! A [`SyntheticModel`] is a stack of square vision layers (`x·W`), an
//! optional unquantized adapter from the vision width to the cross-modal
//! width, and a stack of cross-modal layers. Each cross-modal layer holds the
//! four component groups, always in processing order:
//!
//! | group         | members                                   | input       |
//! |---------------|-------------------------------------------|-------------|
//! | `attn_qkv`    | `language_expert_qkv`, `vision_expert_qkv` | layer input |
//! | `attn_out`    | `dense`                                    | context     |
//! | `mlp_gate_up` | `gate_proj`, `up_proj`                     | residual 1  |
//! | `mlp_down`    | `down_proj`                                | MLP hidden  |
//!
//! The layer forward is deliberately cheap: both QKV experts see every token
//! and their projections are averaged, the attention mixer is the
//! elementwise `v + q ⊙ tanh(k)`, and the MLP is SiLU-gated.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::container::TensorMap;
use crate::tensor::{seeded_random_matrix, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Vision,
    #[serde(rename = "crossmodal")]
    CrossModal,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Vision => "vision",
            ModuleKind::CrossModal => "crossmodal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vision" => Some(ModuleKind::Vision),
            "crossmodal" => Some(ModuleKind::CrossModal),
            _ => None,
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    AttnQkv,
    AttnOut,
    MlpGateUp,
    MlpDown,
}

impl GroupKind {
    /// Processing order inside a cross-modal layer.
    pub const ORDER: [GroupKind; 4] = [
        GroupKind::AttnQkv,
        GroupKind::AttnOut,
        GroupKind::MlpGateUp,
        GroupKind::MlpDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::AttnQkv => "attn_qkv",
            GroupKind::AttnOut => "attn_out",
            GroupKind::MlpGateUp => "mlp_gate_up",
            GroupKind::MlpDown => "mlp_down",
        }
    }

    /// Member suffixes, in the order they are quantized.
    pub fn members(self) -> &'static [&'static str] {
        match self {
            GroupKind::AttnQkv => &["language_expert_qkv", "vision_expert_qkv"],
            GroupKind::AttnOut => &["dense"],
            GroupKind::MlpGateUp => &["gate_proj", "up_proj"],
            GroupKind::MlpDown => &["down_proj"],
        }
    }

    fn member_shape(self, dim: usize, ffn: usize) -> (usize, usize) {
        match self {
            GroupKind::AttnQkv => (dim, 3 * dim),
            GroupKind::AttnOut => (dim, dim),
            GroupKind::MlpGateUp => (dim, ffn),
            GroupKind::MlpDown => (ffn, dim),
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedWeight {
    pub name: String,
    pub weight: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGroup {
    pub kind: GroupKind,
    pub members: Vec<NamedWeight>,
}

impl ComponentGroup {
    pub fn member(&self, suffix: &str) -> &DenseMatrix {
        &self
            .members
            .iter()
            .find(|m| m.name.ends_with(suffix))
            .expect("group membership is validated at construction")
            .weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalLayer {
    pub groups: [ComponentGroup; 4],
}

/// Activations entering each component group of a cross-modal layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInputs {
    pub attn_qkv: DenseMatrix,
    pub attn_out: DenseMatrix,
    pub mlp_gate_up: DenseMatrix,
    pub mlp_down: DenseMatrix,
}

impl GroupInputs {
    pub fn get(&self, kind: GroupKind) -> &DenseMatrix {
        match kind {
            GroupKind::AttnQkv => &self.attn_qkv,
            GroupKind::AttnOut => &self.attn_out,
            GroupKind::MlpGateUp => &self.mlp_gate_up,
            GroupKind::MlpDown => &self.mlp_down,
        }
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl CrossModalLayer {
    pub fn group(&self, kind: GroupKind) -> &ComponentGroup {
        &self.groups[GroupKind::ORDER.iter().position(|&k| k == kind).unwrap()]
    }

    /// Runs the layer, returning its output and the input seen by each group.
    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, GroupInputs), PipelineError> {
        let qkv_group = self.group(GroupKind::AttnQkv);
        let lang = x.matmul(qkv_group.member("language_expert_qkv"))?;
        let vis = x.matmul(qkv_group.member("vision_expert_qkv"))?;
        let (s, d) = x.shape();
        let ctx = DenseMatrix::from_fn(s, d, |r, c| {
            let at = |col: usize| 0.5 * (lang.get(r, col) + vis.get(r, col));
            let (q, k, v) = (at(c), at(d + c), at(2 * d + c));
            v + q * k.tanh()
        });
        let attn = ctx.matmul(self.group(GroupKind::AttnOut).member("dense"))?;
        let h1 = DenseMatrix::from_fn(s, d, |r, c| x.get(r, c) + attn.get(r, c));
        let gu = self.group(GroupKind::MlpGateUp);
        let gate = h1.matmul(gu.member("gate_proj"))?;
        let up = h1.matmul(gu.member("up_proj"))?;
        let hidden = DenseMatrix::from_fn(s, up.cols(), |r, c| silu(gate.get(r, c)) * up.get(r, c));
        let down = hidden.matmul(self.group(GroupKind::MlpDown).member("down_proj"))?;
        let out = DenseMatrix::from_fn(s, d, |r, c| h1.get(r, c) + down.get(r, c));
        Ok((
            out,
            GroupInputs {
                attn_qkv: x.clone(),
                attn_out: ctx,
                mlp_gate_up: h1,
                mlp_down: hidden,
            },
        ))
    }
}

/// Shape parameters for [`SyntheticModel::generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub vision_layers: usize,
    pub crossmodal_layers: usize,
    pub vision_dim: usize,
    pub crossmodal_dim: usize,
    pub ffn_dim: usize,
    pub misc_params: u64,
}

impl ModelSpec {
    /// Equal widths everywhere, FFN twice as wide.
    pub fn uniform(vision_layers: usize, crossmodal_layers: usize, dim: usize) -> Self {
        Self {
            vision_layers,
            crossmodal_layers,
            vision_dim: dim,
            crossmodal_dim: dim,
            ffn_dim: 2 * dim,
            misc_params: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub vision_layers: Vec<NamedWeight>,
    pub crossmodal_layers: Vec<CrossModalLayer>,
    /// Unquantized projection from the vision width to the cross-modal width.
    pub adapter: Option<DenseMatrix>,
    pub vision_dim: usize,
    pub crossmodal_dim: usize,
    pub ffn_dim: usize,
    /// Parameters kept in f16 (embeddings and the like), for size reporting.
    pub misc_params: u64,
}

pub fn vision_layer_name(i: usize) -> String {
    format!("vision.{i}.proj")
}

pub fn crossmodal_member_name(layer: usize, suffix: &str) -> String {
    format!("crossmodal.{layer}.{suffix}")
}

const ADAPTER_NAME: &str = "adapter";

impl SyntheticModel {
    /// Random model with weights drawn N(0, 1/fan_in), seeded per matrix.
    pub fn generate(spec: &ModelSpec, seed: u64) -> Result<Self, PipelineError> {
        if spec.vision_dim == 0 || spec.crossmodal_dim == 0 || spec.ffn_dim == 0 {
            return Err(PipelineError::Invalid("model dimensions must be positive".into()));
        }
        let mut stream = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut next_weight = |rows: usize, cols: usize| {
            stream = stream.wrapping_add(1);
            let std = 1.0 / (rows as f32).sqrt();
            seeded_random_matrix(rows, cols, stream).map(|m| m.map(|v| v * std))
        };
        let mut vision_layers = Vec::with_capacity(spec.vision_layers);
        for i in 0..spec.vision_layers {
            vision_layers.push(NamedWeight {
                name: vision_layer_name(i),
                weight: next_weight(spec.vision_dim, spec.vision_dim)?,
            });
        }
        let adapter = if spec.vision_dim != spec.crossmodal_dim {
            Some(next_weight(spec.vision_dim, spec.crossmodal_dim)?)
        } else {
            None
        };
        let mut crossmodal_layers = Vec::with_capacity(spec.crossmodal_layers);
        for j in 0..spec.crossmodal_layers {
            let mut groups = Vec::with_capacity(4);
            for kind in GroupKind::ORDER {
                let (rows, cols) = kind.member_shape(spec.crossmodal_dim, spec.ffn_dim);
                let mut members = Vec::new();
                for suffix in kind.members() {
                    members.push(NamedWeight {
                        name: crossmodal_member_name(j, suffix),
                        weight: next_weight(rows, cols)?,
                    });
                }
                groups.push(ComponentGroup { kind, members });
            }
            crossmodal_layers.push(CrossModalLayer {
                groups: groups.try_into().expect("four groups"),
            });
        }
        let model = Self {
            vision_layers,
            crossmodal_layers,
            adapter,
            vision_dim: spec.vision_dim,
            crossmodal_dim: spec.crossmodal_dim,
            ffn_dim: spec.ffn_dim,
            misc_params: spec.misc_params,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut seen = std::collections::HashSet::new();
        for w in self.weights() {
            if !seen.insert(w.name.as_str()) {
                return Err(PipelineError::Invalid(format!("duplicate weight name {}", w.name)));
            }
        }
        for v in &self.vision_layers {
            if v.weight.shape() != (self.vision_dim, self.vision_dim) {
                return Err(PipelineError::Invalid(format!(
                    "{} has shape {:?}",
                    v.name,
                    v.weight.shape()
                )));
            }
        }
        match &self.adapter {
            Some(a) if a.shape() != (self.vision_dim, self.crossmodal_dim) => {
                return Err(PipelineError::Invalid("adapter shape".into()));
            }
            None if self.vision_dim != self.crossmodal_dim && !self.crossmodal_layers.is_empty() => {
                return Err(PipelineError::Invalid("differing widths need an adapter".into()));
            }
            _ => {}
        }
        for layer in &self.crossmodal_layers {
            for (group, kind) in layer.groups.iter().zip(GroupKind::ORDER) {
                if group.kind != kind {
                    return Err(PipelineError::Invalid("cross-modal groups out of order".into()));
                }
                let suffixes = kind.members();
                if group.members.len() != suffixes.len() {
                    return Err(PipelineError::Invalid(format!("group {kind} membership")));
                }
                let shape = kind.member_shape(self.crossmodal_dim, self.ffn_dim);
                for (m, suffix) in group.members.iter().zip(suffixes) {
                    if !m.name.ends_with(suffix) || m.weight.shape() != shape {
                        return Err(PipelineError::Invalid(format!("{} does not fit group {kind}", m.name)));
                    }
                }
            }
        }
        Ok(())
    }

    /// All quantizable weights in processing order (vision, then cross-modal
    /// layer by layer, group by group).
    pub fn weights(&self) -> impl Iterator<Item = &NamedWeight> {
        self.vision_layers.iter().chain(
            self.crossmodal_layers
                .iter()
                .flat_map(|l| l.groups.iter().flat_map(|g| g.members.iter())),
        )
    }

    pub fn quantized_param_count(&self) -> u64 {
        self.weights().map(|w| (w.weight.rows() * w.weight.cols()) as u64).sum()
    }

    /// Parameters that stay in f16: `misc_params` plus the adapter.
    pub fn unquantized_param_count(&self) -> u64 {
        self.misc_params + self.adapter.as_ref().map_or(0, |a| (a.rows() * a.cols()) as u64)
    }

    /// Forward pass that stops where `module` begins and returns the
    /// activations arriving at its first layer.
    pub fn forward_to(&self, input: &DenseMatrix, module: ModuleKind) -> Result<DenseMatrix, PipelineError> {
        if input.cols() != self.vision_dim {
            return Err(PipelineError::DimensionMismatch(format!(
                "input has {} features, model expects {}",
                input.cols(),
                self.vision_dim
            )));
        }
        match module {
            ModuleKind::Vision => {
                if self.vision_layers.is_empty() {
                    return Err(PipelineError::MissingModule(module));
                }
                Ok(input.clone())
            }
            ModuleKind::CrossModal => {
                if self.crossmodal_layers.is_empty() {
                    return Err(PipelineError::MissingModule(module));
                }
                let mut h = input.clone();
                for layer in &self.vision_layers {
                    h = h.matmul(&layer.weight)?;
                }
                if let Some(a) = &self.adapter {
                    h = h.matmul(a)?;
                }
                Ok(h)
            }
        }
    }

    pub fn to_tensor_map(&self) -> Result<TensorMap, PipelineError> {
        let mut map = TensorMap::new();
        for w in self.weights() {
            map.insert_matrix(w.name.clone(), &w.weight)?;
        }
        if let Some(a) = &self.adapter {
            map.insert_matrix(ADAPTER_NAME, a)?;
        }
        map.set_metadata("kind", "model");
        map.set_metadata("vision_layers", self.vision_layers.len().to_string());
        map.set_metadata("crossmodal_layers", self.crossmodal_layers.len().to_string());
        map.set_metadata("vision_dim", self.vision_dim.to_string());
        map.set_metadata("crossmodal_dim", self.crossmodal_dim.to_string());
        map.set_metadata("ffn_dim", self.ffn_dim.to_string());
        map.set_metadata("misc_params", self.misc_params.to_string());
        Ok(map)
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self, PipelineError> {
        if map.meta("kind") != Some("model") {
            return Err(PipelineError::Format("container is not a model".into()));
        }
        let num = |key: &str| -> Result<u64, PipelineError> {
            map.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PipelineError::Format(format!("missing or bad metadata {key:?}")))
        };
        let vision_layers = (0..num("vision_layers")? as usize)
            .map(|i| {
                let name = vision_layer_name(i);
                Ok(NamedWeight {
                    weight: map.matrix(&name)?,
                    name,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let mut crossmodal_layers = Vec::new();
        for j in 0..num("crossmodal_layers")? as usize {
            let mut groups = Vec::with_capacity(4);
            for kind in GroupKind::ORDER {
                let members = kind
                    .members()
                    .iter()
                    .map(|suffix| {
                        let name = crossmodal_member_name(j, suffix);
                        Ok(NamedWeight {
                            weight: map.matrix(&name)?,
                            name,
                        })
                    })
                    .collect::<Result<Vec<_>, PipelineError>>()?;
                groups.push(ComponentGroup { kind, members });
            }
            crossmodal_layers.push(CrossModalLayer {
                groups: groups.try_into().expect("four groups"),
            });
        }
        let adapter = match map.get(ADAPTER_NAME) {
            Some(_) => Some(map.matrix(ADAPTER_NAME)?),
            None => None,
        };
        let model = Self {
            vision_layers,
            crossmodal_layers,
            adapter,
            vision_dim: num("vision_dim")? as usize,
            crossmodal_dim: num("crossmodal_dim")? as usize,
            ffn_dim: num("ffn_dim")? as usize,
            misc_params: num("misc_params")?,
        };
        model.validate()?;
        Ok(model)
    }
}
