//! Forward inference for a two-branch sparse-voxel transformer on LiDAR
//! point clouds.
//!
//! Points are voxelised and encoded by a small PointNet. One branch groups
//! voxels along a Morton curve and runs softmax attention inside each group,
//! over several shifted grids. The other branch runs distance-cosine (DISCO)
//! linear attention over all voxels at once. The two outputs are fused with
//! channel attention, decoded to class logits, and scattered back to points.
//!
//! Alongside the pipeline the crate ships the quadratic reference
//! implementations the linear kernels are checked against, grouping cost
//! statistics, segmentation metrics, and the benchmark harness behind the
//! `lest` CLI.

pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod grouping;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod morton;
pub mod rng;
pub mod voxel;

pub use error::{LestError, Result};
pub use linalg::Matrix;
