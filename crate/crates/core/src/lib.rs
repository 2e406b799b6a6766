//! Gaussian-process distance fields for dynamic scenes.
//!
//! Surface points are clustered into small local GPs whose latent occupancy
//! is reverted into Euclidean distance. A per-frame field built from the
//! current depth frame is fused into a persistent octree-backed store, and
//! the resulting field drives reactive and trajectory-optimizing planners.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod field;
pub mod frustum;
pub mod fused;
pub mod geometry;
pub mod gp;
pub mod io;
pub mod planning;
pub mod sim;

pub use field::{DistanceField, FieldError};
pub use frustum::{build_frustum_field, FrustumConfig, FrustumField};
pub use fused::{fuse_point, FusionParams, OctreeConfig, OctreeStore, UpdateStats};
pub use geometry::{Aabb, CameraIntrinsics, Point3, PointCloud, Pose, SensorFrame, Vector3};
pub use gp::{FieldSample, GpError, KernelParams, LocalGpModel};
pub use planning::{chomp_optimize, reactive_rollout, ChompParams, ReactiveParams, SphereBody, Trajectory};
