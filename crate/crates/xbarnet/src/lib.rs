//! Fault-tolerance toolkit for RRAM-crossbar DNN accelerators.
//!
//! The crate trains small convolutional networks with drop-connect weight
//! masking, recalibrates batchnorm statistics to a target deployment fault
//! rate, maps the trained kernels onto tiled 8-bit crossbar arrays, injects
//! stuck-at-one faults, and measures the resulting accuracy / latency /
//! energy trade-offs of widening and kernel-expansion countermeasures.
//!
//! Main pieces:
//!
//! - [`tensor`] / [`layers`] / [`batchnorm`] / [`model`] / [`optim`]: a
//!   minimal deterministic reverse-mode engine with exactly the layer kinds
//!   the studied networks need.
//! - [`net`]: topology descriptions, shape inference, the text spec format,
//!   and stock network builders.
//! - [`dropconnect`] / [`train`] / [`updatevar`]: masked training and the
//!   frozen-weight statistics recalibration pass.
//! - [`quant`] / [`crossbar`]: 8-bit symmetric quantization, weight
//!   unfolding onto crossbar tiles, stuck-at-one fault injection, faulty
//!   inference, and Monte-Carlo evaluation.
//! - [`transforms`]: channel widening, 1x1-to-3x3 shortcut expansion, and
//!   the host/crossbar placement planner.
//! - [`cost`]: operation counting and the calibrated latency/energy model.
//! - [`data`]: the built-in synthetic classification task and a CIFAR-10
//!   loader for full-scale runs.
//! - [`sweep`]: the experiment grid runner with CSV/SVG reporting.

pub mod batchnorm;
pub mod checkpoint;
pub mod cost;
pub mod crossbar;
pub mod data;
pub mod dropconnect;
pub mod error;
pub mod layers;
pub mod model;
pub mod net;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod transforms;
pub mod updatevar;

pub use error::{Error, Result};
pub use model::Model;
pub use net::NetworkSpec;
pub use tensor::Tensor;
