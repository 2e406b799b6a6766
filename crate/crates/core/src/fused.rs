//! The persistent map: an octree-indexed store of surface training points
//! that is updated frame by frame.
//!
//! Each integration builds a per-frame field from the new depth frame and
//! uses it to sort the stored points inside the camera frustum:
//!
//! * points within `eta` of the observed surface are projected onto it,
//!   `p - d·∇d`;
//! * points farther than `eta` that sit in observed free space are deleted,
//!   which clears moved objects in a single frame;
//! * points farther than `eta` hidden behind the measured surface are kept.
//!
//! Current-frame points farther than `eta_new` from the stored surface are
//! then inserted. Leaves whose points change drop their cached local models,
//! which are rebuilt on the next query that reaches them.

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use std::time::Instant;

use crate::cluster::{evaluate, split_to_capacity, ClusterFloor, ClusterGroup, GradientMode, DEFAULT_LEAF_CAPACITY};
use crate::field::{DistanceField, FieldError};
use crate::frustum::{build_frustum_field, FrustumConfig, FrustumField};
use crate::geometry::{Aabb, Color, Point3, PointCloud, SensorFrame, Vector3, VoxelKey};
use crate::gp::{build_local_gp, FieldSample, KernelParams, FACTORIZATION_JITTER};

/// Color given to points inserted without one.
pub const DEFAULT_COLOR: Color = [180, 180, 180];

/// Spatial layout of the store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OctreeConfig {
    /// Center of the cubic world volume.
    pub world_center: [f64; 3],
    /// Edge of the cubic world volume, meters.
    pub world_size: f64,
    /// Upper bound on the leaf edge; the octree depth is the smallest that
    /// brings leaves at or below it.
    pub leaf_size: f64,
    /// Maximum training points per local model inside a leaf.
    pub leaf_capacity: usize,
    /// Re-solve touched leaves at the end of every integration instead of on
    /// first query.
    pub eager_resolve: bool,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            world_center: [0.0; 3],
            world_size: 20.0,
            leaf_size: 0.6,
            leaf_capacity: DEFAULT_LEAF_CAPACITY,
            eager_resolve: false,
        }
    }
}

impl OctreeConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.world_size.is_finite() && self.world_size > 0.0) {
            return Err(FieldError::Config(format!("world size must be > 0, got {}", self.world_size)));
        }
        if !(self.leaf_size.is_finite() && self.leaf_size > 0.0 && self.leaf_size <= self.world_size) {
            return Err(FieldError::Config(format!("leaf size must be in (0, world size], got {}", self.leaf_size)));
        }
        if self.leaf_capacity == 0 || self.leaf_capacity > crate::gp::MAX_TRAINING_POINTS {
            return Err(FieldError::Config(format!("leaf capacity must be in 1..=1024, got {}", self.leaf_capacity)));
        }
        if !self.world_center.iter().all(|v| v.is_finite()) {
            return Err(FieldError::Config("world center must be finite".into()));
        }
        Ok(())
    }

    /// Octree depth: the number of halvings from the world cube to a leaf.
    pub fn depth(&self) -> u32 {
        let mut depth = 0;
        while self.world_size / f64::from(1u32 << depth) > self.leaf_size && depth < 20 {
            depth += 1;
        }
        depth
    }

    pub fn leaf_edge(&self) -> f64 {
        self.world_size / f64::from(1u32 << self.depth())
    }

    pub fn world_bounds(&self) -> Aabb {
        Aabb::cube(Point3::from(self.world_center), self.world_size)
    }
}

/// Thresholds of the per-frame update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    /// Distance separating "fuse onto the observed surface" from "object moved", meters.
    pub eta: f64,
    /// Voxel size of stored and per-frame training points, meters.
    pub training_resolution: f64,
    /// A current point is new when the stored surface is farther than this, meters.
    pub insertion_threshold: f64,
    /// A point must be this much closer than the measured depth to count as free space, meters.
    pub visibility_margin: f64,
    /// Angular bins of the visibility depth image.
    pub visibility_width: usize,
    pub visibility_height: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self::for_resolution(0.01)
    }
}

impl FusionParams {
    /// Defaults scaled to a training resolution: `eta = 5 res`, `eta_new = 2 res`.
    pub fn for_resolution(training_resolution: f64) -> Self {
        Self {
            eta: 5.0 * training_resolution,
            training_resolution,
            insertion_threshold: 2.0 * training_resolution,
            visibility_margin: 0.02,
            visibility_width: 160,
            visibility_height: 120,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.eta) {
            return Err(FieldError::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !positive(self.insertion_threshold) {
            return Err(FieldError::Config(format!(
                "insertion threshold must be > 0, got {}",
                self.insertion_threshold
            )));
        }
        if !positive(self.training_resolution) {
            return Err(FieldError::Config(format!(
                "training resolution must be > 0, got {}",
                self.training_resolution
            )));
        }
        if !(self.visibility_margin.is_finite() && self.visibility_margin >= 0.0) {
            return Err(FieldError::Config(format!("visibility margin must be >= 0, got {}", self.visibility_margin)));
        }
        Ok(())
    }
}

/// Bookkeeping of one integration.
///
/// Selected prior points split into `adjusted + removed + retained_occluded`.
/// `adjusted_skipped` (undefined gradient, left in place) and `merged`
/// (moved onto an occupied voxel and dropped) are subsets of `adjusted`.
/// Current-frame points split into `inserted + covered + out_of_bounds`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub frame_index: u64,
    pub selected: usize,
    pub adjusted: usize,
    pub adjusted_skipped: usize,
    pub merged: usize,
    pub removed: usize,
    pub retained_occluded: usize,
    pub current_points: usize,
    pub inserted: usize,
    pub covered: usize,
    pub out_of_bounds: usize,
    pub dropped_invalid: usize,
    pub store_size: usize,
    pub elapsed_ms: f64,
}

/// Moves a point onto the observed surface: `p - d·∇d`. Points with an
/// undefined gradient are returned unchanged.
pub fn fuse_point(p: &Point3, sample: &FieldSample) -> Point3 {
    if !sample.gradient_defined || sample.distance == 0.0 {
        return *p;
    }
    p - sample.gradient * sample.distance
}

type LeafKey = [i64; 3];

#[derive(Debug)]
struct Leaf {
    points: Vec<Point3>,
    colors: Vec<Color>,
    bounds: Aabb,
    model: OnceLock<ClusterGroup>,
}

impl Leaf {
    fn new() -> Self {
        Self { points: Vec::new(), colors: Vec::new(), bounds: Aabb::empty(), model: OnceLock::new() }
    }

    fn invalidate(&mut self) {
        self.bounds = Aabb::from_points(&self.points);
        self.model = OnceLock::new();
    }
}

enum Placement {
    Inserted,
    Duplicate,
    OutOfBounds,
}

/// Octree-indexed store of fused training points.
///
/// Leaves are kept in a hash map keyed by their integer coordinates at the
/// leaf level of an implicit octree over the world cube. Stored points obey
/// one point per training voxel and a minimum spacing of half a voxel.
#[derive(Debug)]
pub struct OctreeStore {
    config: OctreeConfig,
    kernel: KernelParams,
    resolution: f64,
    leaf_edge: f64,
    origin: Point3,
    leaves: FxHashMap<LeafKey, Leaf>,
    voxels: FxHashMap<VoxelKey, Point3>,
    colored: bool,
    frames: u64,
}

impl OctreeStore {
    pub fn new(config: OctreeConfig, kernel: KernelParams, training_resolution: f64) -> Result<Self, FieldError> {
        config.validate()?;
        kernel.validate()?;
        if !(training_resolution.is_finite() && training_resolution > 0.0) {
            return Err(FieldError::Config(format!("training resolution must be > 0, got {training_resolution}")));
        }
        let world = config.world_bounds();
        Ok(Self {
            leaf_edge: config.leaf_edge(),
            origin: world.min,
            config,
            kernel,
            resolution: training_resolution,
            leaves: FxHashMap::default(),
            voxels: FxHashMap::default(),
            colored: false,
            frames: 0,
        })
    }

    pub fn config(&self) -> &OctreeConfig {
        &self.config
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn training_resolution(&self) -> f64 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Leaves whose local models have not been solved since they last changed.
    pub fn dirty_leaf_count(&self) -> usize {
        self.leaves.values().filter(|l| l.model.get().is_none()).count()
    }

    pub fn frames_integrated(&self) -> u64 {
        self.frames
    }

    fn leaf_key(&self, p: &Point3) -> LeafKey {
        let q = (p - self.origin) / self.leaf_edge;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    fn leaf_box(&self, key: &LeafKey) -> Aabb {
        let min = self.origin + Vector3::new(key[0] as f64, key[1] as f64, key[2] as f64) * self.leaf_edge;
        Aabb::new(min, min + Vector3::repeat(self.leaf_edge))
    }

    fn sorted_keys(&self) -> Vec<LeafKey> {
        let mut keys: Vec<LeafKey> = self.leaves.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Trains a leaf's models. A part that fails to factorize is retried with
    /// jitter and skipped (with a warning) only if that fails as well.
    fn solve_leaf(&self, key: &LeafKey, leaf: &Leaf) -> ClusterGroup {
        let cell = self.leaf_box(key);
        let parts = split_to_capacity(leaf.points.clone(), cell, self.config.leaf_capacity);
        let mut models = Vec::with_capacity(parts.len());
        for part in parts {
            match build_local_gp(&part, &self.kernel) {
                Ok(m) => models.push(m),
                Err(first) => {
                    let jittered = KernelParams {
                        noise_variance: self.kernel.noise_variance + FACTORIZATION_JITTER,
                        ..self.kernel
                    };
                    match build_local_gp(&part, &jittered) {
                        Ok(m) => models.push(m),
                        Err(_) => log::warn!("skipping {} points in leaf {key:?}: {first}", part.len()),
                    }
                }
            }
        }
        ClusterGroup::from_models(models)
    }

    fn group<'a>(&'a self, key: &LeafKey, leaf: &'a Leaf) -> &'a ClusterGroup {
        leaf.model.get_or_init(|| self.solve_leaf(key, leaf))
    }

    /// Solves every dirty leaf now.
    pub fn resolve_all(&self) {
        let keys = self.sorted_keys();
        keys.par_iter().for_each(|k| {
            let leaf = &self.leaves[k];
            self.group(k, leaf);
        });
    }

    pub fn query_with(&self, x: &Point3, mode: GradientMode) -> FieldSample {
        let radius = self.kernel.max_distance();
        let lo = self.leaf_key(&(x - Vector3::repeat(radius)));
        let hi = self.leaf_key(&(x + Vector3::repeat(radius)));
        let mut groups = Vec::new();
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let key = [i, j, k];
                    if let Some(leaf) = self.leaves.get(&key) {
                        if leaf.bounds.distance(x) < radius {
                            groups.push(self.group(&key, leaf));
                        }
                    }
                }
            }
        }
        evaluate(groups, x, &self.kernel, mode, ClusterFloor::BoundingBox { slack: 0.0 })
    }

    pub fn query_batch_with(&self, xs: &[Point3], mode: GradientMode) -> Vec<FieldSample> {
        xs.par_iter().map(|x| self.query_with(x, mode)).collect()
    }

    /// All stored points in deterministic leaf order, with colors when any
    /// inserted point carried one.
    pub fn export_points(&self) -> PointCloud {
        let mut points = Vec::with_capacity(self.len());
        let mut colors = Vec::with_capacity(self.len());
        for key in self.sorted_keys() {
            let leaf = &self.leaves[&key];
            points.extend_from_slice(&leaf.points);
            colors.extend_from_slice(&leaf.colors);
        }
        if self.colored {
            PointCloud::with_colors(points, colors)
        } else {
            PointCloud::from_points(points)
        }
    }

    /// Inserts a cloud (warm start from a saved map) under the usual dedup
    /// rules. Returns how many points were stored.
    pub fn insert_cloud(&mut self, cloud: &PointCloud) -> usize {
        let mut stored = 0;
        let mut touched = FxHashSet::default();
        for (i, p) in cloud.points.iter().enumerate() {
            if matches!(self.place(*p, cloud.color(i), &mut touched), Placement::Inserted) {
                stored += 1;
            }
        }
        self.finish_leaves(touched);
        stored
    }

    fn place(&mut self, p: Point3, color: Option<Color>, touched: &mut FxHashSet<LeafKey>) -> Placement {
        if !p.iter().all(|v| v.is_finite()) || !self.config.world_bounds().contains(&p) {
            return Placement::OutOfBounds;
        }
        let vk = VoxelKey::of(&p, self.resolution);
        if self.voxels.contains_key(&vk) {
            return Placement::Duplicate;
        }
        let min_gap2 = 0.25 * self.resolution * self.resolution;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let nk = VoxelKey([vk.0[0] + dx, vk.0[1] + dy, vk.0[2] + dz]);
                    if let Some(q) = self.voxels.get(&nk) {
                        if (q - p).norm_squared() < min_gap2 {
                            return Placement::Duplicate;
                        }
                    }
                }
            }
        }
        self.voxels.insert(vk, p);
        let key = self.leaf_key(&p);
        let leaf = self.leaves.entry(key).or_insert_with(Leaf::new);
        leaf.points.push(p);
        leaf.colors.push(color.unwrap_or(DEFAULT_COLOR));
        self.colored |= color.is_some();
        touched.insert(key);
        Placement::Inserted
    }

    fn finish_leaves(&mut self, touched: FxHashSet<LeafKey>) {
        let mut keys: Vec<LeafKey> = touched.into_iter().collect();
        keys.sort_unstable();
        for key in &keys {
            let empty = match self.leaves.get_mut(key) {
                Some(leaf) => {
                    leaf.invalidate();
                    leaf.points.is_empty()
                }
                None => false,
            };
            if empty {
                self.leaves.remove(key);
            }
        }
        if self.config.eager_resolve {
            keys.par_iter().for_each(|k| {
                if let Some(leaf) = self.leaves.get(k) {
                    self.group(k, leaf);
                }
            });
        }
    }

    /// Indices of stored points inside the camera frustum of `field`, in
    /// deterministic order, with their positions.
    fn select(&self, field: &FrustumField) -> (Vec<(LeafKey, usize)>, Vec<Point3>) {
        let bounds = field.frustum_bounds();
        let mut keys: Vec<LeafKey> =
            self.leaves.iter().filter(|(_, l)| l.bounds.intersects(&bounds)).map(|(k, _)| *k).collect();
        keys.sort_unstable();
        let mut refs = Vec::new();
        let mut pts = Vec::new();
        for key in keys {
            for (i, p) in self.leaves[&key].points.iter().enumerate() {
                if field.contains(p) {
                    refs.push((key, i));
                    pts.push(*p);
                }
            }
        }
        (refs, pts)
    }

    /// Fuses one depth frame into the store.
    pub fn integrate_frame(&mut self, frame: &SensorFrame, params: &FusionParams) -> Result<UpdateStats, FieldError> {
        let start = Instant::now();
        params.validate()?;
        if (params.training_resolution - self.resolution).abs() > 1e-12 {
            return Err(FieldError::Config(format!(
                "frame resolution {} differs from the store's {}",
                params.training_resolution, self.resolution
            )));
        }
        let config = FrustumConfig {
            training_resolution: self.resolution,
            cluster_size: self.config.leaf_size,
            leaf_capacity: crate::cluster::FRAME_LEAF_CAPACITY,
            grid_origin: [0.0; 3],
            depth_width: params.visibility_width,
            depth_height: params.visibility_height,
        };
        let field = build_frustum_field(frame, &self.kernel, &config, self.frames)?;
        let mut stats = UpdateStats {
            frame_index: self.frames,
            dropped_invalid: field.dropped_invalid(),
            ..UpdateStats::default()
        };
        self.frames += 1;
        if field.is_empty() {
            stats.store_size = self.len();
            stats.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            return Ok(stats);
        }

        // Classify stored points against the current observation.
        let (refs, selected) = self.select(&field);
        stats.selected = selected.len();
        let samples = field.query_batch_with(&selected, GradientMode::Argmin);
        let mut drop_by_leaf: FxHashMap<LeafKey, Vec<usize>> = FxHashMap::default();
        let mut moved: Vec<(Point3, Color)> = Vec::new();
        for ((key, idx), (p, s)) in refs.iter().zip(selected.iter().zip(&samples)) {
            if s.distance <= params.eta {
                stats.adjusted += 1;
                if s.distance == 0.0 {
                    continue;
                }
                if !s.gradient_defined {
                    stats.adjusted_skipped += 1;
                    continue;
                }
                moved.push((fuse_point(p, s), self.leaves[key].colors[*idx]));
                drop_by_leaf.entry(*key).or_default().push(*idx);
            } else {
                let (depth, measured) = field.visibility(p);
                match measured {
                    Some(m) if depth < m - params.visibility_margin => {
                        stats.removed += 1;
                        drop_by_leaf.entry(*key).or_default().push(*idx);
                    }
                    _ => stats.retained_occluded += 1,
                }
            }
        }

        // Decide insertions against the store as it was before this frame.
        let current = field.training_points();
        stats.current_points = current.len();
        let to_store = if self.is_empty() {
            vec![true; current.len()]
        } else {
            self.query_batch_with(&current.points, GradientMode::Argmin)
                .iter()
                .map(|s| s.distance > params.insertion_threshold)
                .collect()
        };

        // Apply removals and moves.
        let mut touched = FxHashSet::default();
        for (key, mut idxs) in drop_by_leaf {
            idxs.sort_unstable();
            let leaf = self.leaves.get_mut(&key).expect("selected leaf exists");
            let mut keep = vec![true; leaf.points.len()];
            for &i in &idxs {
                keep[i] = false;
                self.voxels.remove(&VoxelKey::of(&leaf.points[i], self.resolution));
            }
            let mut it = keep.iter();
            leaf.points.retain(|_| *it.next().unwrap());
            let mut it = keep.iter();
            leaf.colors.retain(|_| *it.next().unwrap());
            touched.insert(key);
        }
        for (p, c) in moved {
            if !matches!(self.place(p, Some(c), &mut touched), Placement::Inserted) {
                stats.merged += 1;
            }
        }
        for (i, p) in current.points.iter().enumerate() {
            if !to_store[i] {
                stats.covered += 1;
                continue;
            }
            match self.place(*p, current.color(i), &mut touched) {
                Placement::Inserted => stats.inserted += 1,
                Placement::Duplicate => stats.covered += 1,
                Placement::OutOfBounds => stats.out_of_bounds += 1,
            }
        }
        self.finish_leaves(touched);
        stats.store_size = self.len();
        stats.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(stats)
    }
}

impl DistanceField for OctreeStore {
    fn query(&self, x: &Point3) -> FieldSample {
        self.query_with(x, GradientMode::Full)
    }

    fn query_batch(&self, xs: &[Point3]) -> Vec<FieldSample> {
        self.query_batch_with(xs, GradientMode::Full)
    }
}
