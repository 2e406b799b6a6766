//! The per-frame field, trained only on the current depth frame.
//!
//! World-frame points are voxel-downsampled, bucketed into a uniform grid of
//! `cluster_size` cells and each cell is split into capacity-bounded local
//! GPs. The field also keeps a coarse depth image of the frame, which the
//! fused store uses to decide whether a stored point sits in observed free
//! space or behind the measured surface.

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::cluster::{evaluate, ClusterFloor, ClusterGroup, GradientMode, FRAME_LEAF_CAPACITY};
use crate::field::{DistanceField, FieldError};
use crate::geometry::{
    in_frustum, transform_cloud, voxel_downsample, Aabb, CameraIntrinsics, Point3, PointCloud, Pose, SensorFrame,
    Vector3,
};
use crate::gp::{FieldSample, KernelParams};

/// Construction parameters of a per-frame field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrustumConfig {
    /// Voxel size used to downsample the frame, meters.
    pub training_resolution: f64,
    /// Edge of a grid cell, meters. Should be at least the gather radius `3l`.
    pub cluster_size: f64,
    /// Maximum training points per local model.
    pub leaf_capacity: usize,
    /// Offset of the cell grid.
    pub grid_origin: [f64; 3],
    /// Depth image size used for the visibility test.
    pub depth_width: usize,
    pub depth_height: usize,
}

impl Default for FrustumConfig {
    fn default() -> Self {
        Self {
            training_resolution: 0.01,
            cluster_size: 0.6,
            leaf_capacity: FRAME_LEAF_CAPACITY,
            grid_origin: [0.0; 3],
            depth_width: 160,
            depth_height: 120,
        }
    }
}

impl FrustumConfig {
    pub fn with_resolution(training_resolution: f64) -> Self {
        Self { training_resolution, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.training_resolution) {
            return Err(FieldError::Config(format!(
                "training resolution must be > 0, got {}",
                self.training_resolution
            )));
        }
        if !positive(self.cluster_size) {
            return Err(FieldError::Config(format!("cluster size must be > 0, got {}", self.cluster_size)));
        }
        if self.leaf_capacity == 0 || self.leaf_capacity > crate::gp::MAX_TRAINING_POINTS {
            return Err(FieldError::Config(format!(
                "leaf capacity must be in 1..={}, got {}",
                crate::gp::MAX_TRAINING_POINTS,
                self.leaf_capacity
            )));
        }
        if self.depth_width == 0 || self.depth_height == 0 {
            return Err(FieldError::Config("depth image must have non-zero size".into()));
        }
        if !self.grid_origin.iter().all(|v| v.is_finite()) {
            return Err(FieldError::Config("grid origin must be finite".into()));
        }
        Ok(())
    }
}

/// Minimum measured depth per angular bin of the camera.
///
/// Bins are uniform in the tangent plane `(x/z, y/z)`, so a simulator that
/// casts rays through pixel centers of the same grid fills one bin per ray.
#[derive(Debug, Clone)]
pub struct DepthImage {
    width: usize,
    height: usize,
    tan_h: f64,
    tan_v: f64,
    depth: Vec<f64>,
}

impl DepthImage {
    pub fn from_camera_points(points: &[Point3], intrinsics: &CameraIntrinsics, width: usize, height: usize) -> Self {
        let mut img = Self {
            width,
            height,
            tan_h: intrinsics.tan_half_horizontal(),
            tan_v: intrinsics.tan_half_vertical(),
            depth: vec![f64::INFINITY; width * height],
        };
        for p in points {
            if let Some((c, r)) = img.bin_of(p) {
                let slot = &mut img.depth[r * width + c];
                *slot = slot.min(p.z);
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Column and row of a camera-frame point, or `None` outside the field of view.
    pub fn bin_of(&self, p: &Point3) -> Option<(usize, usize)> {
        if !(p.z > 0.0) {
            return None;
        }
        let u = (p.x / p.z / self.tan_h + 1.0) * 0.5;
        let v = (p.y / p.z / self.tan_v + 1.0) * 0.5;
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return None;
        }
        let c = ((u * self.width as f64) as usize).min(self.width - 1);
        let r = ((v * self.height as f64) as usize).min(self.height - 1);
        Some((c, r))
    }

    /// Raw bin depth (`INFINITY` when no return landed in the bin).
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    /// Measured depth along the ray of `p`. An empty bin falls back to the
    /// minimum over its non-empty 3×3 neighbourhood; `None` if that is empty too.
    pub fn measured_depth(&self, p: &Point3) -> Option<f64> {
        let (c, r) = self.bin_of(p)?;
        let d = self.at(c, r);
        if d.is_finite() {
            return Some(d);
        }
        let mut best = f64::INFINITY;
        for rr in r.saturating_sub(1)..=(r + 1).min(self.height - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(self.width - 1) {
                best = best.min(self.at(cc, rr));
            }
        }
        best.is_finite().then_some(best)
    }
}

/// Per-frame distance field over the current frame's points.
#[derive(Debug, Clone)]
pub struct FrustumField {
    config: FrustumConfig,
    kernel: KernelParams,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    frame_index: u64,
    points: PointCloud,
    keys: Vec<[i64; 3]>,
    groups: Vec<ClusterGroup>,
    lookup: FxHashMap<[i64; 3], usize>,
    depth: DepthImage,
    dropped_invalid: usize,
}

/// Trains the per-frame field. An empty (or fully invalid) frame yields an
/// empty field whose queries return the far sentinel.
pub fn build_frustum_field(
    frame: &SensorFrame,
    kernel: &KernelParams,
    config: &FrustumConfig,
    frame_index: u64,
) -> Result<FrustumField, FieldError> {
    kernel.validate()?;
    config.validate()?;
    frame.intrinsics.validate()?;
    let mut frame = frame.clone();
    let dropped_invalid = frame.sanitize();
    let depth =
        DepthImage::from_camera_points(&frame.cloud.points, &frame.intrinsics, config.depth_width, config.depth_height);
    let world = transform_cloud(&frame.cloud, &frame.pose);
    let points = voxel_downsample(&world, config.training_resolution)?;

    let origin = Vector3::from(config.grid_origin);
    let mut cells: BTreeMap<[i64; 3], Vec<Point3>> = BTreeMap::new();
    for p in &points.points {
        cells.entry(cell_key(p, &origin, config.cluster_size)).or_default().push(*p);
    }
    let cells: Vec<([i64; 3], Vec<Point3>)> = cells.into_iter().collect();
    let groups = cells
        .par_iter()
        .map(|(key, pts)| {
            ClusterGroup::build(pts.clone(), cell_box(key, &origin, config.cluster_size), config.leaf_capacity, kernel)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let keys: Vec<[i64; 3]> = cells.into_iter().map(|(k, _)| k).collect();
    let lookup = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    Ok(FrustumField {
        config: *config,
        kernel: *kernel,
        pose: frame.pose,
        intrinsics: frame.intrinsics,
        frame_index,
        points,
        keys,
        groups,
        lookup,
        depth,
        dropped_invalid,
    })
}

fn cell_key(p: &Point3, origin: &Vector3, size: f64) -> [i64; 3] {
    let q = (p.coords - origin) / size;
    [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
}

fn cell_box(key: &[i64; 3], origin: &Vector3, size: f64) -> Aabb {
    let min = Point3::new(key[0] as f64, key[1] as f64, key[2] as f64) * size + origin;
    Aabb::new(min, min + Vector3::repeat(size))
}

impl FrustumField {
    pub fn config(&self) -> &FrustumConfig {
        &self.config
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn source_pose(&self) -> &Pose {
        &self.pose
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    /// Downsampled world-frame training points of this frame.
    pub fn training_points(&self) -> &PointCloud {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of occupied grid cells.
    pub fn cell_count(&self) -> usize {
        self.groups.len()
    }

    /// Occupied cell keys in ascending order.
    pub fn cell_keys(&self) -> &[[i64; 3]] {
        &self.keys
    }

    /// Total number of local models across all cells.
    pub fn cluster_count(&self) -> usize {
        self.groups.iter().map(|g| g.models().len()).sum()
    }

    pub fn groups(&self) -> &[ClusterGroup] {
        &self.groups
    }

    pub fn depth_image(&self) -> &DepthImage {
        &self.depth
    }

    /// Number of returns discarded as NaN/Inf or non-positive depth.
    pub fn dropped_invalid(&self) -> usize {
        self.dropped_invalid
    }

    /// World-space box enclosing the camera frustum.
    pub fn frustum_bounds(&self) -> Aabb {
        let corners = self.intrinsics.corners().map(|c| self.pose.transform_point(&c));
        Aabb::from_points(corners.iter())
    }

    pub fn contains(&self, p: &Point3) -> bool {
        in_frustum(p, &self.pose, &self.intrinsics)
    }

    /// Measured depth along the ray through a world point, and the point's own depth.
    pub fn visibility(&self, p: &Point3) -> (f64, Option<f64>) {
        let cam = self.pose.inverse_transform_point(p);
        (cam.z, self.depth.measured_depth(&cam))
    }

    /// Returns the points inside the frustum and their indices into `prior`.
    pub fn select_in_frustum(&self, prior: &PointCloud) -> (PointCloud, Vec<usize>) {
        let indices: Vec<usize> = (0..prior.len()).filter(|&i| self.contains(&prior.points[i])).collect();
        let mut out = PointCloud::new();
        for &i in &indices {
            out.push(prior.points[i], prior.color(i));
        }
        if prior.colors.is_none() {
            out.colors = None;
        }
        (out, indices)
    }

    pub fn query_with(&self, x: &Point3, mode: GradientMode) -> FieldSample {
        let radius = self.kernel.max_distance();
        let ring = (radius / self.config.cluster_size).ceil() as i64;
        let origin = Vector3::from(self.config.grid_origin);
        let k = cell_key(x, &origin, self.config.cluster_size);
        let mut near = Vec::with_capacity(27);
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if let Some(&i) = self.lookup.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        near.push(&self.groups[i]);
                    }
                }
            }
        }
        let floor = ClusterFloor::BoundingBox { slack: self.config.training_resolution };
        evaluate(near, x, &self.kernel, mode, floor)
    }

    pub fn query_batch_with(&self, xs: &[Point3], mode: GradientMode) -> Vec<FieldSample> {
        xs.par_iter().map(|x| self.query_with(x, mode)).collect()
    }
}

impl DistanceField for FrustumField {
    fn query(&self, x: &Point3) -> FieldSample {
        self.query_with(x, GradientMode::Full)
    }

    fn query_batch(&self, xs: &[Point3]) -> Vec<FieldSample> {
        self.query_batch_with(xs, GradientMode::Full)
    }
}
