//! Quantization-aware training of small Transformer encoders with learned
//! step sizes and knowledge distillation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and tape-based reverse-mode
//!   autodiff with a custom-gradient hook.
//! - [`lsq`]: fake quantization with learnable step sizes.
//! - [`scale_init`]: percentile-truncation initialization and activation
//!   calibration.
//! - [`transformer`]: the encoder, its quantization sites and checkpoints.
//! - [`distill`]: hidden-state, attention, prediction and ground-truth losses.
//! - [`trainer`]: the optimization loop.
//! - [`harness`]: synthetic tasks, experiment matrices, size accounting and
//!   metrics files.

pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod lsq;
pub mod scale_init;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{CustomOp, Graph, Var};
pub use lsq::{QuantSpec, ScaleFactor, SiteKind};
pub use tensor::Tensor;
pub use transformer::{BitConfig, ModelConfig, ModelState};
