//! Post-training weight quantization for modality-partitioned models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`container`]: the dense matrix carrier, a seeded RNG and
//!   the `CMDQ` tensor container used by every artifact on disk.
//! * [`calibration`]: activation capture at module boundaries and Hessian
//!   accumulation.
//! * [`quant`]: group-wise round-to-nearest and Hessian-weighted
//!   (GPTQ-style) quantization.
//! * [`pack`]: the N-bit-in-32-bit packed layer format and size estimates.
//! * [`kernel`]: the tiled dequantize-and-multiply kernel, autotuner and
//!   timing spans.
//! * [`pipeline`]: synthetic models, the vision/cross-modal quantization
//!   pipeline, size reporting and the CircularEval metric.

pub mod calibration;
pub mod container;
mod error;
pub mod kernel;
mod linalg;
pub mod pack;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{seeded_random_matrix, DenseMatrix};
