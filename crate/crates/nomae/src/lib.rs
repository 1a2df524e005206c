#![allow(clippy::needless_range_loop)]

//! Self-supervised occupancy pretext pipeline for sparse LiDAR voxel grids.
//!
//! The pipeline voxelizes a point cloud into a multi-scale occupancy pyramid,
//! partitions each scale into visible and masked voxels with hierarchical
//! mask generation, builds neighborhood occupancy targets around the visible
//! voxels, and trains a small sparse encoder/decoder to reconstruct the
//! masked occupancy with a multi-scale binary cross-entropy loss.

pub mod data;
pub mod error;
pub mod geometry;
pub mod masking;
pub mod model;
pub mod neighborhood;
pub mod reference;
pub mod sparsenn;

pub use error::{Error, Result};
