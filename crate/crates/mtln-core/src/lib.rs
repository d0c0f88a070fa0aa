//! Multi-task Link-Net-style network (MTLN) for fetal-head segmentation and
//! ellipse biometrics, built on a minimal reverse-mode autodiff tensor core.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that computes:
//!
//! - [`tensor`] — dense N-D arrays with a single-pass gradient tape
//! - [`nn`] — the MTLN encoder/decoder with multi-scale inputs and the
//!   ellipse-regression head
//! - [`loss`] — boundary-weighted cross-entropy + soft Dice + ellipse MSE
//! - [`ellipse`] — ellipse geometry, rasterization, moment fitting, perimeter
//! - [`metrics`] — DSC, circumference differences, Hausdorff distance
//! - [`data`] — synthetic phantom generation, augmentation, dataset splits
//! - [`train`] — SGD with momentum, the training loop, checkpoint encoding
//!
//! File formats, dataset directories and the command-line interface live in
//! the companion `mtln-cli` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod ellipse;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;
