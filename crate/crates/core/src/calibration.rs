//! Calibration capture at module boundaries and Hessian accumulation.
//!
//! Every sequence position of every captured sample is one Hessian row, so
//! a set of `N` samples of shape `S×D` contributes `N·S` rows to
//! `H = 2·XᵀX`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::container::{ContainerError, TensorMap};
use crate::pipeline::{ModuleKind, PipelineError, SyntheticModel};
use crate::tensor::DenseMatrix;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("empty calibration input list")]
    EmptyInputs,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model has no {0} module")]
    MissingModule(ModuleKind),
    #[error("damping ratio must be positive, got {0}")]
    InvalidDamp(f32),
    #[error("Hessian is all zero; damping cannot make it positive definite")]
    ZeroHessian,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("forward pass failed: {0}")]
    Forward(String),
}

impl From<PipelineError> for CalibrationError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::MissingModule(m) => CalibrationError::MissingModule(m),
            PipelineError::DimensionMismatch(s) => CalibrationError::DimensionMismatch(s),
            other => CalibrationError::Forward(other.to_string()),
        }
    }
}

/// Vision sequence length for a square image: `(image_size / patch_size)² + 1`
/// (the extra position is the class token).
pub fn vision_seq_len(image_size: usize, patch_size: usize) -> usize {
    assert!(patch_size > 0, "patch_size must be positive");
    let side = image_size / patch_size;
    side * side + 1
}

/// Activations captured at the entry of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub module: ModuleKind,
    pub samples: Vec<DenseMatrix>,
    /// Attention masks, position and token-type embeddings. Stored alongside
    /// the samples but never folded into the Hessian.
    pub aux: BTreeMap<String, DenseMatrix>,
}

impl CalibrationSet {
    pub fn new(module: ModuleKind, samples: Vec<DenseMatrix>) -> Result<Self, CalibrationError> {
        let Some(first) = samples.first() else {
            return Err(CalibrationError::EmptyInputs);
        };
        let dim = first.cols();
        if let Some(bad) = samples.iter().find(|s| s.cols() != dim) {
            return Err(CalibrationError::DimensionMismatch(format!(
                "sample has {} features, expected {dim}",
                bad.cols()
            )));
        }
        Ok(Self {
            module,
            samples,
            aux: BTreeMap::new(),
        })
    }

    pub fn with_aux(mut self, name: impl Into<String>, tensor: DenseMatrix) -> Self {
        self.aux.insert(name.into(), tensor);
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].cols()
    }

    pub fn total_rows(&self) -> usize {
        self.samples.iter().map(DenseMatrix::rows).sum()
    }

    /// Raw (undamped) Hessian accumulated over every sample row.
    pub fn hessian(&self) -> HessianAccumulator {
        let mut acc = HessianAccumulator::new(self.feature_dim());
        for s in &self.samples {
            acc.accumulate(s).expect("samples share the feature dimension");
        }
        acc
    }

    pub fn to_tensor_map(&self) -> Result<TensorMap, ContainerError> {
        let mut map = TensorMap::new();
        for (k, s) in self.samples.iter().enumerate() {
            map.insert_matrix(format!("calib/samples/{k}"), s)?;
        }
        for (name, t) in &self.aux {
            map.insert_matrix(format!("calib/aux/{name}"), t)?;
        }
        map.set_metadata("kind", "calibration");
        map.set_metadata("module_id", self.module.as_str());
        Ok(map)
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self, CalibrationError> {
        let bad = |msg: &str| CalibrationError::Container(ContainerError::MalformedManifest(msg.into()));
        if map.meta("kind") != Some("calibration") {
            return Err(bad("container is not a calibration set"));
        }
        let module = map
            .meta("module_id")
            .and_then(ModuleKind::parse)
            .ok_or_else(|| bad("missing or unknown module_id"))?;
        let mut indexed = Vec::new();
        let mut aux = BTreeMap::new();
        for (name, _) in map.iter() {
            if let Some(k) = name.strip_prefix("calib/samples/") {
                let k: usize = k.parse().map_err(|_| bad("non-numeric sample index"))?;
                indexed.push((k, map.matrix(name)?));
            } else if let Some(a) = name.strip_prefix("calib/aux/") {
                aux.insert(a.to_string(), map.matrix(name)?);
            }
        }
        indexed.sort_by_key(|(k, _)| *k);
        if indexed.iter().enumerate().any(|(i, (k, _))| i != *k) {
            return Err(bad("sample indices are not contiguous"));
        }
        let mut set = Self::new(module, indexed.into_iter().map(|(_, m)| m).collect())?;
        set.aux = aux;
        Ok(set)
    }
}

/// Runs `model` on each input up to the entry of `module` and records what
/// arrives there. Nothing past the catch point is executed.
pub fn capture_calibration(
    model: &SyntheticModel,
    inputs: &[DenseMatrix],
    module: ModuleKind,
) -> Result<CalibrationSet, CalibrationError> {
    if inputs.is_empty() {
        return Err(CalibrationError::EmptyInputs);
    }
    let samples = inputs
        .iter()
        .map(|x| model.forward_to(x, module))
        .collect::<Result<Vec<_>, _>>()?;
    CalibrationSet::new(module, samples)
}

/// Running `2·XᵀX` over activation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    dim: usize,
    matrix: Vec<f32>,
    sample_rows: usize,
}

impl HessianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            matrix: vec![0.0; dim * dim],
            sample_rows: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_rows(&self) -> usize {
        self.sample_rows
    }

    pub fn matrix(&self) -> DenseMatrix {
        DenseMatrix::new(self.dim, self.dim, self.matrix.clone()).expect("finite accumulation")
    }

    pub fn accumulate(&mut self, sample: &DenseMatrix) -> Result<(), CalibrationError> {
        if sample.cols() != self.dim {
            return Err(CalibrationError::DimensionMismatch(format!(
                "sample has {} features, accumulator expects {}",
                sample.cols(),
                self.dim
            )));
        }
        let n = self.dim;
        for r in 0..sample.rows() {
            let x = sample.row(r);
            for (a, &xa) in x.iter().enumerate() {
                let two_xa = 2.0 * xa;
                let row = &mut self.matrix[a * n..(a + 1) * n];
                for (h, &xb) in row.iter_mut().zip(x) {
                    *h += two_xa * xb;
                }
            }
        }
        self.sample_rows += sample.rows();
        Ok(())
    }
}

/// `H + λI` with `λ = damp_ratio · mean(diag(H))`.
pub fn finalize_hessian(acc: &HessianAccumulator, damp_ratio: f32) -> Result<DenseMatrix, CalibrationError> {
    if damp_ratio.is_nan() || damp_ratio <= 0.0 || damp_ratio.is_infinite() {
        return Err(CalibrationError::InvalidDamp(damp_ratio));
    }
    let n = acc.dim;
    let lambda = damping_lambda(acc, damp_ratio);
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(CalibrationError::ZeroHessian);
    }
    let mut data = acc.matrix.clone();
    for i in 0..n {
        data[i * n + i] += lambda;
    }
    Ok(DenseMatrix::new(n, n, data).expect("finite Hessian"))
}

/// The damping term `finalize_hessian` adds to every diagonal entry.
pub fn damping_lambda(acc: &HessianAccumulator, damp_ratio: f32) -> f32 {
    let n = acc.dim;
    let mean_diag = (0..n).map(|i| f64::from(acc.matrix[i * n + i])).sum::<f64>() / n.max(1) as f64;
    (f64::from(damp_ratio) * mean_diag) as f32
}
