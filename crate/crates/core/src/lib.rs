//! Synthetic scene-coordinate data generation and camera relocalization.
//!
//! The crate renders labeled frames (RGB, per-pixel world coordinates and a
//! validity mask) from a colored point cloud, matches rendered colors onto
//! a photo pool, aligns coordinate frames, and recovers 6DoF camera poses
//! from scene-coordinate maps with PnP-RANSAC.

// `!(a <= b)` is used on purpose so NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod geometry;
pub mod histmatch;
pub mod manifest;
pub mod pnp;
pub mod pointcloud;
pub mod registration;
pub mod renderer;
pub mod scm;
pub mod toy;

mod parallel;

pub use geometry::{compose, project, rotation_angle_deg, unproject, CameraIntrinsics, RigidTransform, Rotation, Vec3};
