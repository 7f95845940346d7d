use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::container::ContainerError;
use crate::kernel::KernelError;
use crate::pack::PackError;
use crate::pipeline::PipelineError;
use crate::quant::QuantError;
use crate::tensor::TensorError;

/// Crate-wide error wrapping every module error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Unreadable or malformed artifact.
    Format,
    /// A configuration or shape invariant was violated.
    Invariant,
    /// Numerical breakdown, e.g. a Hessian that is not positive definite.
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Format => 3,
            ErrorKind::Invariant => 4,
            ErrorKind::Numeric => 5,
        }
    }
}

fn container_kind(e: &ContainerError) -> ErrorKind {
    match e {
        ContainerError::DuplicateName(_) => ErrorKind::Invariant,
        _ => ErrorKind::Format,
    }
}

fn calibration_kind(e: &CalibrationError) -> ErrorKind {
    match e {
        CalibrationError::ZeroHessian => ErrorKind::Numeric,
        CalibrationError::Container(c) => container_kind(c),
        _ => ErrorKind::Invariant,
    }
}

fn quant_kind(e: &QuantError) -> ErrorKind {
    match e {
        QuantError::CholeskyFailed => ErrorKind::Numeric,
        _ => ErrorKind::Invariant,
    }
}

fn pipeline_kind(e: &PipelineError) -> ErrorKind {
    match e {
        PipelineError::Format(_) => ErrorKind::Format,
        PipelineError::Container(c) => container_kind(c),
        PipelineError::Quant(q) => quant_kind(q),
        PipelineError::Calibration(c) => calibration_kind(c),
        PipelineError::Layer { source, .. } => pipeline_kind(source),
        PipelineError::Pack(PackError::ScaleOverflow(_)) => ErrorKind::Numeric,
        _ => ErrorKind::Invariant,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Container(e) => container_kind(e),
            Error::Calibration(e) => calibration_kind(e),
            Error::Quant(e) => quant_kind(e),
            Error::Pack(PackError::ScaleOverflow(_)) => ErrorKind::Numeric,
            Error::Pipeline(e) => pipeline_kind(e),
            Error::Tensor(TensorError::NonFinite { .. }) => ErrorKind::Numeric,
            Error::Tensor(_) | Error::Pack(_) | Error::Kernel(_) => ErrorKind::Invariant,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let format: Error = ContainerError::BadMagic(*b"XXXX").into();
        let invariant: Error = QuantError::InvalidBits(3).into();
        let numeric: Error = PipelineError::Layer {
            layer: "l".into(),
            source: Box::new(QuantError::CholeskyFailed.into()),
        }
        .into();
        assert_eq!(format.kind().exit_code(), 3);
        assert_eq!(invariant.kind().exit_code(), 4);
        assert_eq!(numeric.kind().exit_code(), 5);
    }
}
