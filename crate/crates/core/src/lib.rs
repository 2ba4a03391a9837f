//! LiDAR point-cloud semantic segmentation at desk scale.
//!
//! The pipeline mirrors the multi-view projection family of segmentation
//! networks: point clouds are voxelized into bird's-eye-view pillars for
//! feature learning, projected onto a spherical range image, run through a
//! multi-kernel context block and a dilated encoder-decoder, trained with a
//! combination of weighted cross-entropy, Lovász-Softmax and total-variation
//! losses, and finally refined point-by-point with a range-gated KNN vote.
//!
//! Everything runs on a small reverse-mode tensor engine in this crate, so
//! the whole stack (including gradients) is testable without a GPU.

pub mod augment;
pub mod checkpoint;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pointcloud;
pub mod postprocess;
pub mod projection;
pub mod synth;
pub mod tensor;
pub mod trainer;

mod error;

pub use error::{Error, Result};
