//! MFP-Net: a multi-scale feature-pyramid U-Net with bidirectional
//! cross-attention, built on a small CPU tensor engine with reverse-mode
//! automatic differentiation.
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`] / [`graph`] / [`ops`]: dense tensors, the autodiff tape and
//!   the differentiable operators (dilated convolution, group norm,
//!   activations, bilinear resampling, block pooling, normalized sampling),
//! - [`gradcheck`]: finite-difference verification of every backward rule,
//! - [`model`]: the U-Net / MFP-Net variants and their wiring,
//! - [`attention`]: channel attention over block means plus flow-field
//!   warping, fused bidirectionally,
//! - [`phantom`] / [`segvol`]: synthetic labeled volumes and their binary
//!   file format,
//! - [`train`]: loss, SGD with momentum, schedules, checkpoints, evaluation,
//! - [`metrics`]: volumetric Dice, mean surface distance, paired t-tests.

pub mod attention;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod phantom;
pub mod segvol;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GradientSet, Graph, NodeId};
pub use params::{ParamNodes, ParameterSet};
pub use tensor::{DType, Scalar, Tensor};
