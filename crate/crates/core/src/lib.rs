//! Cylindrical partitioning and asymmetric sparse 3D convolution networks
//! for LiDAR point cloud semantic segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`io`]: scan/label files, class remapping, synthetic scenes
//! - [`partition`]: cylindrical grid, point↔cell tables, label encoding, statistics
//! - [`sparse`]: sparse tensors, rulebooks, convolution and its adjoint, dense oracles
//! - [`network`]: point MLP, asymmetric residual/downsample/upsample blocks,
//!   context module, point-wise refinement
//! - [`training`]: losses, Adam, gradient checking, the training loop
//! - [`eval`]: metrics, run configuration, command line
//!
//! With the default `parallel` feature, per-offset convolution products and
//! per-scan statistics run on rayon. Results do not depend on thread count.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod eval;
pub mod io;
pub mod network;
pub mod par;
pub mod partition;
pub mod selftest;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
