//! Multiple resolution residual network (MRRN) for thoracic organ-at-risk
//! segmentation, built on a small CPU autodiff engine.
//!
//! Layers, bottom up:
//! - [`tensor`], [`kernels`], [`tape`]: dense tensors, differentiable kernels
//!   and reverse-mode gradients; [`gradcheck`] and [`adam`] on top.
//! - [`arch`]: MRRN and U-Net graphs, parameter store, checkpoints.
//! - [`phantom`]: synthetic thoracic phantoms and the MRSL dataset format.
//! - [`train`] and [`metrics`]: training loop, Dice evaluation, reporting.
//! - [`cli`]: the `mrrn` command-line tool.

pub mod adam;
pub mod arch;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod phantom;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{LabelMask, Precision, Real, Shape, Tensor};
