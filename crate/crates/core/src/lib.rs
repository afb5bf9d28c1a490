//! Tiny SSD: a small single-shot object detector built from Fire modules.
//!
//! The crate covers the whole inference path and the tooling around it:
//!
//! - [`tensor`] / [`ops`]: NCHW tensors and the convolution, pooling, concat,
//!   ReLU and softmax kernels.
//! - [`graph`]: the declarative architecture ([`graph::tiny_ssd_spec`]), static
//!   shape inference and the forward pass.
//! - [`priors`] / [`detect`]: default boxes, offset decoding, NMS and detections.
//! - [`audit`]: parameter, MAC and model-size accounting.
//! - [`model_io`] / [`image`]: half-precision model files, seeded weights, PPM input.
//! - [`eval`]: VOC 2007 mAP evaluation.

pub mod audit;
pub mod detect;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod model_io;
pub mod ops;
pub mod priors;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{tiny_ssd_spec, ArchSpec, HeadOutput};
pub use tensor::{Shape, Tensor};
