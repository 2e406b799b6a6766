//! Accuracy metrics against analytic ground truth.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::first_hit_depth;
use super::scene::{Scene, SceneError};
use crate::field::DistanceField;
use crate::geometry::{Point3, Vector3};

/// Cosine of the angle between two vectors, clamped to [-1, 1].
///
/// The denominator is `sqrt(|a|²|b|²)` so that identical and antiparallel
/// inputs give exactly 1 and -1. Zero vectors give NaN.
pub fn cosine_similarity(a: &Vector3, b: &Vector3) -> f64 {
    let denom = (a.norm_squared() * b.norm_squared()).sqrt();
    if denom == 0.0 {
        return f64::NAN;
    }
    (a.dot(b) / denom).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Distance RMSE over the query set, meters.
    pub rmse: f64,
    /// Mean gradient cosine over queries where both gradients are defined.
    pub mean_cosine: Option<f64>,
    pub queries: usize,
    pub cosine_queries: usize,
    /// Wall-clock batch query time divided by the query count.
    pub query_us_per_point: f64,
    /// Mean integrate time over the run, when known.
    pub mean_update_ms: Option<f64>,
    pub store_size: Option<usize>,
}

impl MetricsReport {
    /// Copy with timing fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self { query_us_per_point: 0.0, mean_update_ms: None, ..self.clone() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("sampling gave up after {attempts} attempts with {found} of {wanted} queries")]
    Sampling { attempts: usize, found: usize, wanted: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Compares field estimates against the scene's exact distances at time `t`.
pub fn evaluate<F: DistanceField + ?Sized>(
    field: &F,
    scene: &Scene,
    t: f64,
    queries: &[Point3],
) -> Result<MetricsReport, MetricsError> {
    if queries.is_empty() {
        return Err(MetricsError::EmptyQuerySet);
    }
    let start = Instant::now();
    let samples = field.query_batch(queries);
    let elapsed = start.elapsed().as_secs_f64();
    let shapes = scene.shapes_at(t);
    let truths: Vec<_> = queries.iter().map(|x| super::scene::ground_truth_shapes(&shapes, x)).collect();
    let estimates: Vec<_> = samples.iter().map(|s| (s.distance, s.gradient_defined.then_some(s.gradient))).collect();
    let truth_pairs: Vec<_> = truths
        .iter()
        .map(|g| (g.distance, (!g.inside && g.gradient != Vector3::zeros()).then_some(g.gradient)))
        .collect();
    let mut report = compare(&estimates, &truth_pairs)?;
    report.query_us_per_point = elapsed * 1e6 / queries.len() as f64;
    Ok(report)
}

/// RMSE and mean cosine between estimated and true (distance, gradient)
/// pairs; `None` gradients are excluded from the cosine mean.
pub fn compare(
    estimates: &[(f64, Option<Vector3>)],
    truths: &[(f64, Option<Vector3>)],
) -> Result<MetricsReport, MetricsError> {
    assert_eq!(estimates.len(), truths.len(), "estimate and truth counts differ");
    if estimates.is_empty() {
        return Err(MetricsError::EmptyQuerySet);
    }
    let mut sq = 0.0;
    let mut cos_sum = 0.0;
    let mut cos_n = 0;
    for ((d, g), (dt, gt)) in estimates.iter().zip(truths) {
        sq += (d - dt).powi(2);
        if let (Some(g), Some(gt)) = (g, gt) {
            let c = cosine_similarity(g, gt);
            if c.is_finite() {
                cos_sum += c;
                cos_n += 1;
            }
        }
    }
    Ok(MetricsReport {
        rmse: (sq / estimates.len() as f64).sqrt(),
        mean_cosine: (cos_n > 0).then(|| cos_sum / cos_n as f64),
        queries: estimates.len(),
        cosine_queries: cos_n,
        ..Default::default()
    })
}

/// Uniform samples from the camera-visible free space at time `t` whose true
/// distance lies in `range`. Points are drawn uniformly in frustum volume and
/// kept when they are in front of the first surface along their pixel ray.
pub fn sample_query_set(
    scene: &Scene,
    t: f64,
    count: usize,
    seed: u64,
    range: (f64, f64),
) -> Result<Vec<Point3>, MetricsError> {
    let pose = scene.camera_pose(t).map_err(SceneError::from)?;
    let shapes = scene.shapes_at(t);
    let intr = &scene.intrinsics;
    let (th, tv) = (intr.tan_half_horizontal(), intr.tan_half_vertical());
    let (n3, f3) = (intr.near.powi(3), intr.far.powi(3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(2000).max(10_000);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= max_attempts {
            return Err(MetricsError::Sampling { attempts, found: out.len(), wanted: count });
        }
        attempts += 1;
        let z = (n3 + rng.random::<f64>() * (f3 - n3)).cbrt();
        let dir = Vector3::new(rng.random_range(-th..=th), rng.random_range(-tv..=tv), 1.0);
        let x = pose.transform_point(&Point3::from(dir * z));
        let truth = super::scene::ground_truth_shapes(&shapes, &x);
        if truth.inside || truth.distance < range.0 || truth.distance > range.1 {
            continue;
        }
        if first_hit_depth(scene, t, &pose, &dir).is_some_and(|hit| hit <= z) {
            continue;
        }
        out.push(x);
    }
    Ok(out)
}

/// RMSE of the true distance at the given points, i.e. how far stored
/// training points sit from the actual surfaces.
pub fn surface_rmse(points: &[Point3], scene: &Scene, t: f64) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let shapes = scene.shapes_at(t);
    let sq: f64 = points.iter().map(|p| super::scene::ground_truth_shapes(&shapes, p).distance.powi(2)).sum();
    Some((sq / points.len() as f64).sqrt())
}

/// Number of points strictly inside the ball of `radius` around `center`.
pub fn points_in_ball(points: &[Point3], center: &Point3, radius: f64) -> usize {
    points.iter().filter(|p| (*p - center).norm() < radius).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EmptyField;
    use crate::gp::KernelParams;

    #[test]
    fn cosine_is_bit_exact_on_canonical_pairs() {
        let v = Vector3::new(0.3, -1.7, 2.9);
        assert_eq!(cosine_similarity(&v, &v), 1.0);
        assert_eq!(cosine_similarity(&v, &(-v)), -1.0);
        assert_eq!(cosine_similarity(&Vector3::x(), &Vector3::y()), 0.0);
        assert_eq!(cosine_similarity(&Vector3::new(1.0, 1.0, 0.0), &Vector3::new(1.0, -1.0, 5.0)), 0.0);
        assert!(cosine_similarity(&Vector3::zeros(), &v).is_nan());
    }

    #[test]
    fn compare_examples() {
        let g = Some(Vector3::z());
        let same = compare(&[(0.2, g), (0.4, g)], &[(0.2, g), (0.4, g)]).unwrap();
        assert_eq!((same.rmse, same.mean_cosine), (0.0, Some(1.0)));
        let ortho = compare(&[(0.1, Some(Vector3::x())), (0.1, Some(Vector3::y()))], &[(0.1, g), (0.1, g)]).unwrap();
        assert_eq!(ortho.mean_cosine, Some(0.0));
        let off = compare(&[(0.3, None), (0.1, None)], &[(0.0, g), (0.5, g)]).unwrap();
        assert!((off.rmse - (0.125f64).sqrt()).abs() < 1e-15);
        assert_eq!((off.cosine_queries, off.mean_cosine), (0, None));
        assert!(matches!(compare(&[], &[]), Err(MetricsError::EmptyQuerySet)));
    }

    #[test]
    fn query_set_is_visible_free_space() {
        let scene = Scene::ball_on_table();
        let qs = sample_query_set(&scene, 1.0, 300, 9, (0.02, 0.5)).unwrap();
        assert_eq!(qs.len(), 300);
        let pose = scene.camera_pose(1.0).unwrap();
        for x in &qs {
            let truth = scene.ground_truth(1.0, x);
            assert!(!truth.inside && (0.02..=0.5).contains(&truth.distance));
            assert!(crate::geometry::in_frustum(x, &pose, &scene.intrinsics));
        }
        assert_eq!(qs, sample_query_set(&scene, 1.0, 300, 9, (0.02, 0.5)).unwrap());
    }

    #[test]
    fn evaluate_rejects_empty_queries_and_is_pure() {
        let scene = Scene::ball_on_table();
        let field = EmptyField { params: KernelParams::default() };
        assert!(matches!(evaluate(&field, &scene, 0.0, &[]), Err(MetricsError::EmptyQuerySet)));
        let qs = sample_query_set(&scene, 0.0, 50, 1, (0.02, 0.5)).unwrap();
        let a = evaluate(&field, &scene, 0.0, &qs).unwrap();
        let b = evaluate(&field, &scene, 0.0, &qs).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert!(a.rmse > 0.0);
    }
}
