//! End-to-end runs: render or replay frames, fuse them, evaluate, write artifacts.

use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{Dataset, DatasetError};
use super::metrics::{self, MetricsError, MetricsReport};
use super::render::render_frame;
use super::scene::{Scene, SceneError};
use crate::cluster::GradientMode;
use crate::field::{DistanceField, FieldError};
use crate::fused::{FusionParams, OctreeConfig, OctreeStore, UpdateStats};
use crate::geometry::{Point3, SensorFrame};
use crate::gp::KernelParams;
use crate::io::{self, IoError, QueryGrid};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frame {index}: {source}")]
    Frame { index: usize, source: Box<PipelineError> },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl PipelineError {
    /// Whether the error stems from bad input configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Field(FieldError::Config(_))
                | PipelineError::Scene(SceneError::Invalid(_) | SceneError::Json(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub kernel: KernelParams,
    pub octree: OctreeConfig,
    pub fusion: FusionParams,
    /// Gaussian depth-noise sigma for rendered frames, meters.
    pub depth_noise: f64,
    pub seed: u64,
    pub query_count: usize,
    pub query_range: (f64, f64),
    /// Evaluate every N frames in addition to the last; 0 evaluates only the last.
    pub evaluate_every: usize,
    pub max_frames: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            kernel: KernelParams::default(),
            octree: OctreeConfig::default(),
            fusion: FusionParams::default(),
            depth_noise: 0.002,
            seed: 0,
            query_count: 2000,
            query_range: (0.02, 0.5),
            evaluate_every: 0,
            max_frames: None,
        }
    }
}

impl PipelineConfig {
    /// Defaults with all resolution-dependent thresholds derived from `resolution`.
    pub fn for_resolution(resolution: f64) -> Self {
        Self { fusion: FusionParams::for_resolution(resolution), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.kernel.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.octree.validate()?;
        self.fusion.validate()?;
        if !(self.depth_noise.is_finite() && self.depth_noise >= 0.0) {
            return Err(PipelineError::Config(format!("depth noise must be >= 0, got {}", self.depth_noise)));
        }
        let (lo, hi) = self.query_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi) {
            return Err(PipelineError::Config(format!("query range must satisfy 0 <= lo < hi, got {lo}..{hi}")));
        }
        if self.query_count == 0 {
            return Err(PipelineError::Config("query count must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the per-frame metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub t: f64,
    pub selected: usize,
    pub adjusted: usize,
    pub removed: usize,
    pub retained_occluded: usize,
    pub inserted: usize,
    pub covered: usize,
    pub dropped_invalid: usize,
    pub store_size: usize,
    pub update_ms: f64,
    pub rmse: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub surface_rmse: Option<f64>,
}

impl FrameRecord {
    fn new(frame: usize, t: f64, s: &UpdateStats) -> Self {
        Self {
            frame,
            t,
            selected: s.selected,
            adjusted: s.adjusted,
            removed: s.removed,
            retained_occluded: s.retained_occluded,
            inserted: s.inserted,
            covered: s.covered,
            dropped_invalid: s.dropped_invalid,
            store_size: s.store_size,
            update_ms: s.elapsed_ms,
            rmse: None,
            mean_cosine: None,
            surface_rmse: None,
        }
    }
}

/// Result of a run. `accuracy` and `surface_rmse` need ground truth and are
/// absent for replays without a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: usize,
    pub store_size: usize,
    pub mean_update_ms: f64,
    pub max_update_ms: f64,
    pub accuracy: Option<MetricsReport>,
    pub surface_rmse: Option<f64>,
}

impl RunSummary {
    pub fn without_timing(&self) -> Self {
        Self {
            mean_update_ms: 0.0,
            max_update_ms: 0.0,
            accuracy: self.accuracy.as_ref().map(MetricsReport::without_timing),
            ..self.clone()
        }
    }
}

pub struct PipelineRun {
    pub summary: RunSummary,
    pub records: Vec<FrameRecord>,
    pub store: OctreeStore,
    /// Time of the last integrated frame.
    pub last_t: f64,
}

/// Fuses a frame sequence. With a scene, the store is evaluated against its
/// ground truth on the configured schedule and at the last frame.
pub fn run_frames<I>(frames: I, config: &PipelineConfig, truth: Option<&Scene>) -> Result<PipelineRun, PipelineError>
where
    I: IntoIterator<Item = Result<SensorFrame, PipelineError>>,
{
    config.validate()?;
    let mut store = OctreeStore::new(config.octree, config.kernel, config.fusion.training_resolution)?;
    let mut records = Vec::new();
    let mut last_t = 0.0;
    let limit = config.max_frames.unwrap_or(usize::MAX);
    for (index, frame) in frames.into_iter().take(limit).enumerate() {
        let wrap = |e: PipelineError| PipelineError::Frame { index, source: Box::new(e) };
        let frame = frame.map_err(wrap)?;
        let stats = store.integrate_frame(&frame, &config.fusion).map_err(|e| wrap(e.into()))?;
        last_t = frame.timestamp;
        let mut record = FrameRecord::new(index, frame.timestamp, &stats);
        if let Some(scene) = truth {
            if config.evaluate_every > 0 && index % config.evaluate_every == 0 {
                let (report, surface) = evaluate_store(&store, scene, frame.timestamp, config).map_err(wrap)?;
                record.rmse = Some(report.rmse);
                record.mean_cosine = report.mean_cosine;
                record.surface_rmse = surface;
            }
        }
        info!("frame {index}: {} points, {:.1} ms", stats.store_size, stats.elapsed_ms);
        records.push(record);
    }
    let n = records.len();
    let mean_update_ms = if n > 0 { records.iter().map(|r| r.update_ms).sum::<f64>() / n as f64 } else { 0.0 };
    let max_update_ms = records.iter().map(|r| r.update_ms).fold(0.0, f64::max);
    let (accuracy, surface_rmse) = match truth {
        Some(scene) if n > 0 => {
            let (mut report, surface) = evaluate_store(&store, scene, last_t, config)?;
            report.mean_update_ms = Some(mean_update_ms);
            report.store_size = Some(store.len());
            if let Some(last) = records.last_mut() {
                last.rmse = Some(report.rmse);
                last.mean_cosine = report.mean_cosine;
                last.surface_rmse = surface;
            }
            (Some(report), surface)
        }
        _ => (None, None),
    };
    let summary =
        RunSummary { frames: n, store_size: store.len(), mean_update_ms, max_update_ms, accuracy, surface_rmse };
    Ok(PipelineRun { summary, records, store, last_t })
}

fn evaluate_store(
    store: &OctreeStore,
    scene: &Scene,
    t: f64,
    config: &PipelineConfig,
) -> Result<(MetricsReport, Option<f64>), PipelineError> {
    let queries = metrics::sample_query_set(scene, t, config.query_count, config.seed, config.query_range)?;
    let mut report = metrics::evaluate(store, scene, t, &queries)?;
    report.store_size = Some(store.len());
    let surface = metrics::surface_rmse(&store.export_points().points, scene, t);
    Ok((report, surface))
}

/// Renders every frame of the scene (seeded per frame) and fuses them in order.
pub fn run_scene(scene: &Scene, config: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    scene.validate()?;
    let times = scene.frame_times();
    let frames = times.into_iter().enumerate().map(|(k, t)| {
        let frame = if config.depth_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(k as u64));
            render_frame(scene, t, Some((config.depth_noise, &mut rng)))
        } else {
            render_frame::<ChaCha8Rng>(scene, t, None)
        };
        frame.map_err(PipelineError::from)
    });
    run_frames(frames, config, Some(scene))
}

/// Fuses a recorded dataset, optionally scoring it against a scene.
pub fn run_dataset(
    dataset: Dataset,
    config: &PipelineConfig,
    truth: Option<&Scene>,
) -> Result<PipelineRun, PipelineError> {
    let frames = dataset.map(|r| r.map(|f| f.frame).map_err(PipelineError::from));
    run_frames(frames, config, truth)
}

/// A horizontal slice through the middle of the stored points, padded by the
/// gather radius, with at most 200 samples per side.
pub fn default_slice(store: &OctreeStore) -> Option<QueryGrid> {
    let pts = store.export_points();
    if pts.is_empty() {
        return None;
    }
    let b = crate::geometry::Aabb::from_points(&pts.points);
    let pad = store.kernel().max_distance();
    let (w, h) = (b.max.x - b.min.x + 2.0 * pad, b.max.y - b.min.y + 2.0 * pad);
    let spacing = (w.max(h) / 199.0).max(0.005);
    Some(QueryGrid {
        origin: [b.min.x - pad, b.min.y - pad, 0.5 * (b.min.z + b.max.z)],
        u_axis: [1.0, 0.0, 0.0],
        v_axis: [0.0, 1.0, 0.0],
        spacing,
        u_count: (w / spacing).ceil() as usize + 1,
        v_count: (h / spacing).ceil() as usize + 1,
    })
}

/// Writes `map.ply`, `slice.csv`, `metrics.csv` and `summary.json` into `out`.
pub fn write_artifacts(out: &Path, run: &PipelineRun, slice: Option<&QueryGrid>) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out).map_err(|source| IoError::File { path: out.display().to_string(), source })?;
    io::write_ply(&out.join("map.ply"), &run.store.export_points())?;
    let grid = slice.cloned().or_else(|| default_slice(&run.store));
    if let Some(grid) = grid {
        let points = grid.points();
        let samples = run.store.query_batch(&points);
        io::write_samples_csv(&out.join("slice.csv"), &points, &samples)?;
    }
    io::write_rows_csv(&out.join("metrics.csv"), &run.records)?;
    let json = serde_json::to_string_pretty(&run.summary).map_err(IoError::from)?;
    std::fs::write(out.join("summary.json"), json)
        .map_err(|source| IoError::File { path: out.display().to_string(), source })?;
    Ok(())
}

/// Accuracy of one resolution in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub resolution: f64,
    pub rmse: f64,
    pub mean_cosine: Option<f64>,
    /// Distance to the nearest stored training point, scored the same way.
    pub baseline_rmse: f64,
    pub store_size: usize,
    pub mean_update_ms: f64,
    pub query_us_per_point: f64,
}

/// Brute-force distance to the nearest of `points`.
pub fn nearest_point_distance(points: &[Point3], x: &Point3) -> f64 {
    points.iter().map(|p| (p - x).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
}

/// Runs the scene once per training resolution and scores the final store
/// and a nearest-training-point baseline on the same query set.
pub fn bench_resolutions(
    scene: &Scene,
    resolutions: &[f64],
    base: &PipelineConfig,
) -> Result<Vec<BenchRow>, PipelineError> {
    let mut rows = Vec::with_capacity(resolutions.len());
    for &res in resolutions {
        let config = PipelineConfig { fusion: FusionParams::for_resolution(res), ..base.clone() };
        let run = run_scene(scene, &config)?;
        let report = run.summary.accuracy.clone().ok_or_else(|| PipelineError::Config("scene has no frames".into()))?;
        let queries =
            metrics::sample_query_set(scene, run.last_t, config.query_count, config.seed, config.query_range)?;
        let stored = run.store.export_points().points;
        let shapes = scene.shapes_at(run.last_t);
        let sq: f64 = queries
            .par_iter()
            .map(|x| {
                let d = nearest_point_distance(&stored, x);
                (d - super::scene::ground_truth_shapes(&shapes, x).distance).powi(2)
            })
            .sum();
        let baseline_rmse = (sq / queries.len() as f64).sqrt();
        info!("resolution {res}: rmse {:.4}, baseline {:.4}", report.rmse, baseline_rmse);
        rows.push(BenchRow {
            resolution: res,
            rmse: report.rmse,
            mean_cosine: report.mean_cosine,
            baseline_rmse,
            store_size: run.store.len(),
            mean_update_ms: run.summary.mean_update_ms,
            query_us_per_point: report.query_us_per_point,
        });
    }
    Ok(rows)
}

/// Query-mode-explicit helper for slices rendered from a store.
pub fn slice_samples(store: &OctreeStore, grid: &QueryGrid) -> (Vec<Point3>, Vec<crate::gp::FieldSample>) {
    let points = grid.points();
    let samples = store.query_batch_with(&points, GradientMode::Full);
    (points, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{CameraKeyframe, Primitive, Shape};

    pub(crate) fn plane_scene() -> Scene {
        Scene {
            primitives: vec![Primitive {
                shape: Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 },
                color: [10, 20, 30],
                motion: vec![],
            }],
            camera: vec![CameraKeyframe { t: 0.0, position: [0.0, -0.5, 1.0], target: [0.0, 0.3, 0.0] }],
            intrinsics: Default::default(),
            width: 80,
            height: 60,
            frame_rate: 10.0,
            duration: 0.0,
        }
    }

    #[test]
    fn one_frame_plane_run() {
        let scene = plane_scene();
        let config = PipelineConfig { depth_noise: 0.0, query_count: 200, ..PipelineConfig::for_resolution(0.02) };
        let run = run_scene(&scene, &config).unwrap();
        assert_eq!(run.summary.frames, 1);
        let frame = crate::sim::render::render_clean(&scene, 0.0).unwrap();
        let world = crate::geometry::transform_cloud(&frame.cloud, &frame.pose);
        let down = crate::geometry::voxel_downsample(&world, 0.02).unwrap();
        assert_eq!(run.store.len(), down.len());
        let acc = run.summary.accuracy.as_ref().unwrap();
        assert!(acc.rmse.is_finite() && acc.mean_cosine.unwrap() > 0.9);
        let dir = tempfile::tempdir().unwrap();
        write_artifacts(dir.path(), &run, None).unwrap();
        assert_eq!(crate::io::read_ply(&dir.path().join("map.ply")).unwrap().len(), down.len());
        for f in ["slice.csv", "metrics.csv", "summary.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn config_validation() {
        let c = PipelineConfig { query_range: (0.5, 0.1), ..Default::default() };
        assert!(c.validate().unwrap_err().is_config());
        let c = PipelineConfig { depth_noise: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn nearest_point_baseline() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        assert_eq!(nearest_point_distance(&pts, &Point3::new(0.75, 0.0, 0.0)), 0.25);
        assert_eq!(nearest_point_distance(&[], &Point3::origin()), f64::INFINITY);
    }
}
