//! Analytic scenes: primitives with keyframed translations and a keyframed camera.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Color, GeometryError, Point3, Pose, Vector3};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scene file: {0}")]
    Io(#[from] std::io::Error),
}

/// Primitive shapes in their keyframe-zero placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Points `x` with `normal · x = offset`.
    Plane {
        normal: [f64; 3],
        offset: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
}

/// A translation reached at time `t`; motion is linear between keyframes and
/// held constant outside them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    #[serde(default = "default_color")]
    pub color: Color,
    #[serde(default)]
    pub motion: Vec<Keyframe>,
}

fn default_color() -> Color {
    [200, 200, 200]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraKeyframe {
    pub t: f64,
    pub position: [f64; 3],
    pub target: [f64; 3],
}

/// Distance and outward gradient to a primitive surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistance {
    pub distance: f64,
    /// Unit vector away from the nearest surface; zero when undefined.
    pub gradient: Vector3,
    pub inside: bool,
}

impl Primitive {
    pub fn translation_at(&self, t: f64) -> Vector3 {
        interpolate(&self.motion, t, |k| k.t, |k| Vector3::from(k.translation)).unwrap_or_else(Vector3::zeros)
    }

    /// Shape placed at time `t`.
    pub fn shape_at(&self, t: f64) -> Shape {
        let d = self.translation_at(t);
        match &self.shape {
            Shape::Plane { normal, offset } => {
                let n = Vector3::from(*normal).normalize();
                Shape::Plane { normal: n.into(), offset: offset / Vector3::from(*normal).norm() + n.dot(&d) }
            }
            Shape::Sphere { center, radius } => {
                Shape::Sphere { center: (Vector3::from(*center) + d).into(), radius: *radius }
            }
            Shape::Cuboid { center, half_extents } => {
                Shape::Cuboid { center: (Vector3::from(*center) + d).into(), half_extents: *half_extents }
            }
        }
    }
}

impl Shape {
    /// Smallest ray parameter `s > s_min` with `origin + s·dir` on the surface.
    pub fn intersect(&self, origin: &Point3, dir: &Vector3, s_min: f64) -> Option<f64> {
        match self {
            Shape::Plane { normal, offset } => {
                let n = Vector3::from(*normal);
                let denom = n.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let s = (offset - n.dot(&origin.coords)) / denom;
                (s > s_min).then_some(s)
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - Point3::from(*center);
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // Numerically stable pair of roots.
                let q = if b > 0.0 { -(b + sq) } else { -b + sq };
                let (mut r0, mut r1) = (q / a, if q != 0.0 { c / q } else { q / a });
                if r0 > r1 {
                    std::mem::swap(&mut r0, &mut r1);
                }
                [r0, r1].into_iter().find(|&s| s > s_min)
            }
            Shape::Cuboid { center, half_extents } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for i in 0..3 {
                    let lo = center[i] - half_extents[i];
                    let hi = center[i] + half_extents[i];
                    if dir[i].abs() < 1e-15 {
                        if origin[i] < lo || origin[i] > hi {
                            return None;
                        }
                    } else {
                        let a = (lo - origin[i]) / dir[i];
                        let b = (hi - origin[i]) / dir[i];
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                if t0 > t1 {
                    return None;
                }
                [t0, t1].into_iter().find(|&s| s > s_min)
            }
        }
    }

    /// Unsigned distance to the surface with the outward gradient.
    pub fn distance(&self, x: &Point3) -> SurfaceDistance {
        match self {
            Shape::Plane { normal, offset } => {
                let n = Vector3::from(*normal);
                let s = n.dot(&x.coords) - offset;
                let gradient = if s > 0.0 {
                    n
                } else if s < 0.0 {
                    -n
                } else {
                    Vector3::zeros()
                };
                SurfaceDistance { distance: s.abs(), gradient, inside: false }
            }
            Shape::Sphere { center, radius } => {
                let v = x - Point3::from(*center);
                let r = v.norm();
                let gradient = if r > 0.0 { v / r } else { Vector3::zeros() };
                if r < *radius {
                    SurfaceDistance { distance: 0.0, gradient, inside: true }
                } else {
                    SurfaceDistance { distance: r - radius, gradient, inside: false }
                }
            }
            Shape::Cuboid { center, half_extents } => {
                let q = (x - Point3::from(*center)).map(f64::abs) - Vector3::from(*half_extents);
                if q.max() < 0.0 {
                    return SurfaceDistance { distance: 0.0, gradient: Vector3::zeros(), inside: true };
                }
                let outside = q.map(|v| v.max(0.0));
                let distance = outside.norm();
                let rel = x - Point3::from(*center);
                let gradient = if distance > 0.0 {
                    Vector3::new(outside.x * rel.x.signum(), outside.y * rel.y.signum(), outside.z * rel.z.signum())
                        / distance
                } else {
                    Vector3::zeros()
                };
                SurfaceDistance { distance, gradient, inside: false }
            }
        }
    }

    /// Implicit-equation residual: zero on the surface.
    pub fn residual(&self, x: &Point3) -> f64 {
        match self {
            Shape::Plane { normal, offset } => Vector3::from(*normal).dot(&x.coords) - offset,
            Shape::Sphere { center, radius } => (x - Point3::from(*center)).norm() - radius,
            Shape::Cuboid { center, half_extents } => {
                let q = (x - Point3::from(*center)).map(f64::abs) - Vector3::from(*half_extents);
                q.max()
            }
        }
    }
}

fn interpolate<K, T>(keys: &[K], t: f64, time: impl Fn(&K) -> f64, value: impl Fn(&K) -> T) -> Option<T>
where
    T: std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + Copy,
{
    let first = keys.first()?;
    if t <= time(first) {
        return Some(value(first));
    }
    for pair in keys.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if t <= time(b) {
            let span = time(b) - time(a);
            let u = if span > 0.0 { (t - time(a)) / span } else { 1.0 };
            return Some(value(a) * (1.0 - u) + value(b) * u);
        }
    }
    keys.last().map(value)
}

/// A scripted scene observed by a moving camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub camera: Vec<CameraKeyframe>,
    #[serde(default)]
    pub intrinsics: CameraIntrinsics,
    /// Rays per image row and column.
    pub width: usize,
    pub height: usize,
    pub frame_rate: f64,
    pub duration: f64,
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SceneError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.intrinsics.validate()?;
        if self.camera.is_empty() {
            return Err(SceneError::Invalid("camera needs at least one keyframe".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::Invalid("image size must be non-zero".into()));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite())
            || !(self.duration >= 0.0 && self.duration.is_finite())
        {
            return Err(SceneError::Invalid("frame rate must be > 0 and duration >= 0".into()));
        }
        let sorted = |ts: Vec<f64>| ts.windows(2).all(|w| w[0] <= w[1]) && ts.iter().all(|t| t.is_finite());
        if !sorted(self.camera.iter().map(|k| k.t).collect()) {
            return Err(SceneError::Invalid("camera keyframes must be time-ordered".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !sorted(p.motion.iter().map(|k| k.t).collect()) {
                return Err(SceneError::Invalid(format!("primitive {i}: keyframes must be time-ordered")));
            }
            let ok = match &p.shape {
                Shape::Plane { normal, .. } => Vector3::from(*normal).norm() > 0.0,
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Cuboid { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
            };
            if !ok {
                return Err(SceneError::Invalid(format!("primitive {i}: degenerate shape")));
            }
        }
        for k in &self.camera {
            self.pose_from(k)?;
        }
        Ok(())
    }

    fn pose_from(&self, k: &CameraKeyframe) -> Result<Pose, GeometryError> {
        Pose::look_at(Point3::from(k.position), Point3::from(k.target), Vector3::z())
    }

    pub fn camera_pose(&self, t: f64) -> Result<Pose, GeometryError> {
        let eye = interpolate(&self.camera, t, |k| k.t, |k| Vector3::from(k.position)).expect("validated");
        let target = interpolate(&self.camera, t, |k| k.t, |k| Vector3::from(k.target)).expect("validated");
        Pose::look_at(Point3::from(eye), Point3::from(target), Vector3::z())
    }

    /// Frame timestamps `0, 1/f, …` up to the duration.
    pub fn frame_times(&self) -> Vec<f64> {
        let n = (self.duration * self.frame_rate + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 / self.frame_rate).collect()
    }

    pub fn shapes_at(&self, t: f64) -> Vec<Shape> {
        self.primitives.iter().map(|p| p.shape_at(t)).collect()
    }

    /// Exact distance to the nearest primitive at time `t`; ties go to the
    /// lower primitive index. Points inside a primitive get distance 0.
    pub fn ground_truth(&self, t: f64, x: &Point3) -> SurfaceDistance {
        ground_truth_shapes(&self.shapes_at(t), x)
    }

    /// First hit of a world ray among the shapes, as (parameter, primitive index).
    pub fn cast(&self, t: f64, origin: &Point3, dir: &Vector3, s_min: f64) -> Option<(f64, usize)> {
        cast_shapes(&self.shapes_at(t), origin, dir, s_min)
    }

    /// A ball rolling across a table, watched from above at a 30° tilt.
    pub fn ball_on_table() -> Self {
        let eye_height = 1.5;
        let tilt = 30f64.to_radians();
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Cuboid { center: [0.0, 0.0, -0.025], half_extents: [0.75, 0.5, 0.025] },
                    color: [150, 110, 70],
                    motion: vec![],
                },
                Primitive {
                    shape: Shape::Sphere { center: [0.0, 0.0, 0.15], radius: 0.15 },
                    color: [220, 40, 40],
                    motion: vec![
                        Keyframe { t: 0.0, translation: [-0.5, 0.0, 0.0] },
                        Keyframe { t: 5.0, translation: [0.5, 0.0, 0.0] },
                    ],
                },
            ],
            camera: vec![CameraKeyframe {
                t: 0.0,
                position: [0.0, -eye_height * tilt.tan(), eye_height],
                target: [0.0, 0.0, 0.0],
            }],
            intrinsics: CameraIntrinsics::default(),
            width: 160,
            height: 120,
            frame_rate: 10.0,
            duration: 5.0,
        }
    }

    /// A closed box room with a few objects, for resolution sweeps.
    pub fn static_room() -> Self {
        let wall = |center: [f64; 3], half_extents: [f64; 3]| Primitive {
            shape: Shape::Cuboid { center, half_extents },
            color: [190, 190, 200],
            motion: vec![],
        };
        Self {
            primitives: vec![
                wall([0.0, 0.0, -0.05], [2.0, 2.0, 0.05]),
                wall([0.0, 2.05, 1.25], [2.0, 0.05, 1.25]),
                wall([-2.05, 0.0, 1.25], [0.05, 2.0, 1.25]),
                wall([2.05, 0.0, 1.25], [0.05, 2.0, 1.25]),
                Primitive {
                    shape: Shape::Cuboid { center: [0.3, 0.9, 0.4], half_extents: [0.5, 0.3, 0.4] },
                    color: [120, 90, 60],
                    motion: vec![],
                },
                Primitive {
                    shape: Shape::Sphere { center: [-0.6, 0.6, 0.35], radius: 0.35 },
                    color: [60, 120, 200],
                    motion: vec![],
                },
            ],
            camera: vec![
                CameraKeyframe { t: 0.0, position: [-1.2, -1.8, 1.6], target: [0.0, 0.8, 0.4] },
                CameraKeyframe { t: 1.0, position: [1.2, -1.8, 1.6], target: [0.0, 0.8, 0.4] },
            ],
            intrinsics: CameraIntrinsics::default(),
            width: 160,
            height: 120,
            frame_rate: 5.0,
            duration: 1.0,
        }
    }
}

pub fn ground_truth_shapes(shapes: &[Shape], x: &Point3) -> SurfaceDistance {
    let mut best = SurfaceDistance { distance: f64::INFINITY, gradient: Vector3::zeros(), inside: false };
    for s in shapes {
        let d = s.distance(x);
        if d.inside {
            return d;
        }
        if d.distance < best.distance {
            best = d;
        }
    }
    best
}

pub fn cast_shapes(shapes: &[Shape], origin: &Point3, dir: &Vector3, s_min: f64) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in shapes.iter().enumerate() {
        if let Some(hit) = s.intersect(origin, dir, s_min) {
            if best.is_none_or(|(b, _)| hit < b) {
                best = Some((hit, i));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ground_truth_examples() {
        let plane = Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 };
        let d = plane.distance(&Point3::new(0.0, 0.0, 0.4));
        assert_eq!((d.distance, d.gradient), (0.4, Vector3::z()));
        let sphere = Shape::Sphere { center: [0.0; 3], radius: 0.15 };
        let d = sphere.distance(&Point3::new(0.3, 0.0, 0.0));
        assert!((d.distance - 0.15).abs() < 1e-15);
        assert_eq!(d.gradient, Vector3::x());
        let d = sphere.distance(&Point3::new(0.05, 0.0, 0.0));
        assert!(d.inside);
        assert_eq!(d.distance, 0.0);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let a = Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 };
        let b = Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 1.0 };
        let d = ground_truth_shapes(&[a, b], &Point3::new(0.0, 0.0, 0.5));
        assert_eq!(d.gradient, Vector3::z());
    }

    #[test]
    fn cuboid_distance() {
        let b = Shape::Cuboid { center: [0.0; 3], half_extents: [1.0, 1.0, 1.0] };
        let d = b.distance(&Point3::new(2.0, 2.0, 0.0));
        assert!((d.distance - 2f64.sqrt()).abs() < 1e-15);
        assert!((d.gradient - Vector3::new(1.0, 1.0, 0.0).normalize()).norm() < 1e-15);
        assert!(b.distance(&Point3::new(0.5, 0.0, 0.0)).inside);
        assert_eq!(b.intersect(&Point3::new(-3.0, 0.0, 0.0), &Vector3::x(), 0.0), Some(2.0));
        assert_eq!(b.intersect(&Point3::origin(), &Vector3::x(), 0.0), Some(1.0));
    }

    #[test]
    fn dense_sampling_oracle() {
        // Plane z = 0 plus a sphere; compare against brute force over surface samples.
        let shapes = [
            Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 },
            Shape::Sphere { center: [0.2, 0.1, 0.4], radius: 0.15 },
        ];
        let mut samples = Vec::new();
        for i in -150..=150 {
            for j in -150..=150 {
                samples.push(Point3::new(i as f64 * 0.004, j as f64 * 0.004, 0.0));
            }
        }
        let n = 300;
        for i in 0..n {
            for j in 0..2 * n {
                let th = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                let ph = std::f64::consts::PI * j as f64 / n as f64;
                samples.push(
                    Point3::new(0.2, 0.1, 0.4)
                        + Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()) * 0.15,
                );
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 100 {
            let x = Point3::new(rng.random_range(-0.2..0.5), rng.random_range(-0.2..0.4), rng.random_range(0.01..0.7));
            let truth = ground_truth_shapes(&shapes, &x);
            if truth.inside {
                continue;
            }
            let brute = samples.iter().map(|p| (x - p).norm()).fold(f64::INFINITY, f64::min);
            assert!((truth.distance - brute).abs() < 1e-3, "{} vs {brute}", truth.distance);
            checked += 1;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let scene = Scene::ball_on_table();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 200 {
            let x = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(0.0..0.6));
            let g = scene.ground_truth(1.0, &x);
            if g.inside || g.distance < 1e-3 {
                continue;
            }
            let mut fd = Vector3::zeros();
            for i in 0..3 {
                let mut e = Vector3::zeros();
                e[i] = h;
                fd[i] = (scene.ground_truth(1.0, &(x + e)).distance - scene.ground_truth(1.0, &(x - e)).distance)
                    / (2.0 * h);
            }
            // Skip medial-axis points where the two sides disagree.
            if (fd.norm() - 1.0).abs() > 1e-3 {
                continue;
            }
            assert!(fd.normalize().dot(&g.gradient) >= 0.9999);
            checked += 1;
        }
    }

    #[test]
    fn keyframes_interpolate_and_clamp() {
        let scene = Scene::ball_on_table();
        let ball = &scene.primitives[1];
        assert_eq!(ball.translation_at(-1.0), Vector3::new(-0.5, 0.0, 0.0));
        assert!((ball.translation_at(2.5) - Vector3::zeros()).norm() < 1e-15);
        assert_eq!(ball.translation_at(9.0), Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(scene.frame_times().len(), 51);
        let moved = Primitive {
            shape: Shape::Plane { normal: [0.0, 0.0, 2.0], offset: 2.0 },
            color: [0; 3],
            motion: vec![Keyframe { t: 0.0, translation: [0.0, 0.0, 0.5] }],
        };
        assert_eq!(moved.shape_at(0.0), Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 1.5 });
    }

    #[test]
    fn scene_json_roundtrip_and_validation() {
        let scene = Scene::ball_on_table();
        let text = serde_json::to_string_pretty(&scene).unwrap();
        assert_eq!(Scene::from_json(&text).unwrap(), scene);
        let mut bad = scene.clone();
        bad.camera.clear();
        assert!(bad.validate().is_err());
        let mut bad = scene;
        bad.primitives[1].shape = Shape::Sphere { center: [0.0; 3], radius: -1.0 };
        assert!(bad.validate().is_err());
    }
}
