//! Post-training quantization for small convolutional classifiers.
//!
//! The crate covers the whole workflow: build or load a CNN graph, train it
//! at desk scale, quantize it three ways (float16 weights, dynamic-range
//! int8, calibrated full-integer int8), execute it in the matching mode and
//! report the size/accuracy trade-off used to pick a deployable model.
//!
//! # Modules
//!
//! - [`tensor`] -- tensors, dtypes, scale/zero-point primitives, binary16
//! - [`graph`] -- layer graph, architecture builders, `.eqm` container, BN folding
//! - [`engine`] -- f32, fp16, dynamic-int8 and full-int8 execution
//! - [`quantizer`] -- the three post-training passes and min/max calibration
//! - [`datakit`] -- image folders, resizing, stratified splits, synthetic data
//! - [`trainer`] -- backprop, SGD with step decay, head replacement
//! - [`evalkit`] -- confusion matrices, macro metrics, comparison and selection
//! - [`cli`] -- the `edgequant` command surface

pub mod cli;
pub mod datakit;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod graph;
pub(crate) mod linalg;
pub mod quantizer;
pub mod tensor;
pub mod trainer;

pub use engine::ExecMode;
pub use error::{ContainerError, Error, Result};
pub use graph::{Graph, Node, NodeKind, QuantTag};
pub use tensor::{DType, QuantParams, Tensor};
