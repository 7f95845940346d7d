//! Modality-partitioned quantization of synthetic models, plus size
//! accounting and the CircularEval metric.

mod eval;
mod model;
mod quantize;
mod size;

use thiserror::Error;

pub use eval::{circular_eval_accuracy, QuestionRecord};
pub use model::{
    crossmodal_member_name, vision_layer_name, ComponentGroup, CrossModalLayer, GroupInputs, GroupKind, ModelSpec,
    ModuleKind, NamedWeight, SyntheticModel,
};
pub use quantize::{
    quantize_model, quantize_model_logged, LayerReport, Method, QuantReport, QuantizedCheckpoint, REPORT_SCHEMA_VERSION,
};
pub use size::{size_report, size_report_for_shapes, LayerSize, SizeReport};

use crate::calibration::CalibrationError;
use crate::container::ContainerError;
use crate::pack::PackError;
use crate::quant::QuantError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model has no {0} module")]
    MissingModule(ModuleKind),
    #[error("missing {0} calibration set")]
    MissingCalibration(ModuleKind),
    #[error("format error: {0}")]
    Format(String),
    #[error("no evaluation records")]
    EmptyRecords,
    #[error("question {0:?} has no passes")]
    EmptyPasses(String),
    #[error("{layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Calibration(Box<CalibrationError>),
}

impl From<CalibrationError> for PipelineError {
    fn from(e: CalibrationError) -> Self {
        PipelineError::Calibration(Box::new(e))
    }
}
