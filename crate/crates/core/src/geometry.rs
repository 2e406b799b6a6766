//! Rigid transforms, camera frusta, point clouds and voxel downsampling.
//!
//! Camera frames follow the usual optical convention: `+z` is the viewing
//! direction, `+x` points right in the image and `+y` points down.

use std::collections::HashMap;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;

/// Tolerance on `RᵀR − I` accepted for a rotation matrix.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (max |RᵀR − I| = {0:e})")]
    NotOrthonormal(f64),
    #[error("rotation has determinant {0}, expected +1")]
    Reflection(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
    #[error("voxel resolution must be positive and finite, got {0}")]
    Resolution(f64),
    #[error("degenerate look-at: eye, target and up are collinear")]
    DegenerateLookAt,
}

/// A rigid transform taking points from a local frame into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::NotOrthonormal(err));
        }
        let det = rotation.determinant();
        if det <= 0.0 {
            return Err(GeometryError::Reflection(det));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    /// Builds a pose from a translation and a (not necessarily normalized)
    /// quaternion given as `qx qy qz qw`.
    pub fn from_translation_quaternion(
        translation: Vector3,
        qx: f64,
        qy: f64,
        qz: f64,
        qw: f64,
    ) -> Result<Self, GeometryError> {
        let q = Quaternion::new(qw, qx, qy, qz);
        if !q.coords.iter().all(|v| v.is_finite()) || q.norm() < 1e-12 {
            return Err(GeometryError::NonFinite("quaternion"));
        }
        let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        Self::new(rot, translation)
    }

    /// Camera pose at `eye` looking at `target`, with image-up as close to
    /// `up` as possible.
    pub fn look_at(eye: Point3, target: Point3, up: Vector3) -> Result<Self, GeometryError> {
        let forward = (target - eye).try_normalize(1e-12).ok_or(GeometryError::DegenerateLookAt)?;
        let right = forward.cross(&up).try_normalize(1e-12).ok_or(GeometryError::DegenerateLookAt)?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye.coords)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3 {
        &self.translation
    }

    pub fn position(&self) -> Point3 {
        Point3::from(self.translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3) -> Vector3 {
        self.rotation * v
    }

    /// Maps a world point into this pose's local frame.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation.tr_mul(&(p.coords - self.translation)))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Pinhole frustum description. Angles are full fields of view in radians.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub horizontal_fov: f64,
    pub vertical_fov: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    pub fn new(horizontal_fov: f64, vertical_fov: f64, near: f64, far: f64) -> Result<Self, GeometryError> {
        let intr = Self { horizontal_fov, vertical_fov, near, far };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let pi = std::f64::consts::PI;
        let fov_ok = |f: f64| f.is_finite() && f > 0.0 && f < pi;
        if !fov_ok(self.horizontal_fov) || !fov_ok(self.vertical_fov) {
            return Err(GeometryError::Intrinsics(format!(
                "fields of view must lie in (0, π), got {} x {}",
                self.horizontal_fov, self.vertical_fov
            )));
        }
        if !(self.near.is_finite() && self.far.is_finite() && self.near > 0.0 && self.near < self.far) {
            return Err(GeometryError::Intrinsics(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn tan_half_horizontal(&self) -> f64 {
        (0.5 * self.horizontal_fov).tan()
    }

    pub fn tan_half_vertical(&self) -> f64 {
        (0.5 * self.vertical_fov).tan()
    }

    /// Membership test for a point already expressed in the camera frame.
    /// Near plane exclusive, far plane and angular bounds inclusive.
    #[inline]
    pub fn contains_camera_point(&self, p: &Point3) -> bool {
        let depth = p.z;
        if !(depth > self.near && depth <= self.far) {
            return false;
        }
        p.x.abs() <= depth * self.tan_half_horizontal() && p.y.abs() <= depth * self.tan_half_vertical()
    }

    /// The eight frustum corners in the camera frame (near plane first).
    pub fn corners(&self) -> [Point3; 8] {
        let (th, tv) = (self.tan_half_horizontal(), self.tan_half_vertical());
        let mut out = [Point3::origin(); 8];
        for (i, depth) in [self.near, self.far].into_iter().enumerate() {
            for (j, (sx, sy)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].into_iter().enumerate() {
                out[i * 4 + j] = Point3::new(sx * th * depth, sy * tv * depth, depth);
            }
        }
        out
    }
}

impl Default for CameraIntrinsics {
    /// Roughly a RealSense D435 depth stream.
    fn default() -> Self {
        Self { horizontal_fov: 69f64.to_radians(), vertical_fov: 42f64.to_radians(), near: 0.1, far: 5.0 }
    }
}

pub type Color = [u8; 3];

/// An unorganized point cloud with optional per-point colors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<Color>>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<Point3>) -> Self {
        Self { points, colors: None }
    }

    /// Panics if the two vectors differ in length.
    pub fn with_colors(points: Vec<Point3>, colors: Vec<Color>) -> Self {
        assert_eq!(points.len(), colors.len(), "one color per point");
        Self { points, colors: Some(colors) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn color(&self, i: usize) -> Option<Color> {
        self.colors.as_ref().map(|c| c[i])
    }

    pub fn push(&mut self, p: Point3, color: Option<Color>) {
        match (&mut self.colors, color) {
            (Some(colors), c) => colors.push(c.unwrap_or([255, 255, 255])),
            (None, Some(c)) if self.points.is_empty() => self.colors = Some(vec![c]),
            (None, Some(c)) => {
                let mut colors = vec![[255, 255, 255]; self.points.len()];
                colors.push(c);
                self.colors = Some(colors);
            }
            (None, None) => {}
        }
        self.points.push(p);
    }

    /// Drops points with a non-finite coordinate and returns how many were removed.
    pub fn retain_finite(&mut self) -> usize {
        self.retain(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Keeps only the points for which `keep` holds; returns the number dropped.
    pub fn retain(&mut self, mut keep: impl FnMut(&Point3) -> bool) -> usize {
        let before = self.points.len();
        let mask: Vec<bool> = self.points.iter().map(&mut keep).collect();
        let mut it = mask.iter();
        self.points.retain(|_| *it.next().unwrap());
        if let Some(colors) = &mut self.colors {
            let mut it = mask.iter();
            colors.retain(|_| *it.next().unwrap());
        }
        before - self.points.len()
    }
}

/// One depth-camera observation: points in the camera frame plus the camera pose.
#[derive(Debug, Clone)]
pub struct SensorFrame {
    pub cloud: PointCloud,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub timestamp: f64,
}

impl SensorFrame {
    /// Removes NaN/Inf returns and returns at non-positive depth.
    /// Returns the number of points dropped.
    pub fn sanitize(&mut self) -> usize {
        self.cloud.retain(|p| p.iter().all(|v| v.is_finite()) && p.z > 0.0)
    }
}

/// Applies `pose` to every point; order and colors are preserved.
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud { points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(), colors: cloud.colors.clone() }
}

pub fn in_frustum(point_world: &Point3, pose: &Pose, intr: &CameraIntrinsics) -> bool {
    intr.contains_camera_point(&pose.inverse_transform_point(point_world))
}

/// Integer voxel coordinates on a grid anchored at the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey(pub [i64; 3]);

impl VoxelKey {
    #[inline]
    pub fn of(p: &Point3, resolution: f64) -> Self {
        VoxelKey([
            (p.x / resolution).floor() as i64,
            (p.y / resolution).floor() as i64,
            (p.z / resolution).floor() as i64,
        ])
    }
}

/// Replaces all points falling in the same voxel of edge `resolution` by
/// their centroid. Output order follows the first point seen in each voxel;
/// the centroid keeps that point's color.
pub fn voxel_downsample(cloud: &PointCloud, resolution: f64) -> Result<PointCloud, GeometryError> {
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(GeometryError::Resolution(resolution));
    }
    struct Acc {
        first: usize,
        offset_sum: Vector3,
        count: usize,
    }
    let mut slots: HashMap<VoxelKey, usize> = HashMap::with_capacity(cloud.len());
    let mut accs: Vec<Acc> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = VoxelKey::of(p, resolution);
        match slots.get(&key) {
            Some(&slot) => {
                let acc = &mut accs[slot];
                acc.offset_sum += p - cloud.points[acc.first];
                acc.count += 1;
            }
            None => {
                slots.insert(key, accs.len());
                accs.push(Acc { first: i, offset_sum: Vector3::zeros(), count: 1 });
            }
        }
    }
    // Centroids are accumulated relative to the first point so a voxel holding
    // a single (or repeated) point reproduces it exactly.
    let points = accs.iter().map(|a| cloud.points[a.first] + a.offset_sum / a.count as f64).collect();
    let colors = cloud.colors.as_ref().map(|c| accs.iter().map(|a| c[a.first]).collect());
    Ok(PointCloud { points, colors })
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn empty() -> Self {
        let inf = f64::INFINITY;
        Self { min: Point3::new(inf, inf, inf), max: Point3::new(-inf, -inf, -inf) }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn cube(center: Point3, edge: f64) -> Self {
        let h = Vector3::repeat(0.5 * edge);
        Self { min: center - h, max: center + h }
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    pub fn grow(&mut self, p: &Point3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn grow_box(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    pub fn center(&self) -> Point3 {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn extent(&self) -> Vector3 {
        self.max - self.min
    }

    /// Half-open containment `[min, max)`.
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] < self.max[i])
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    #[inline]
    pub fn distance_squared(&self, p: &Point3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let v = p[i];
            let d = if v < self.min[i] {
                self.min[i] - v
            } else if v > self.max[i] {
                v - self.max[i]
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    #[inline]
    pub fn distance(&self, p: &Point3) -> f64 {
        self.distance_squared(p).sqrt()
    }

    /// Point of the box nearest to `p`.
    #[inline]
    pub fn closest_point(&self, p: &Point3) -> Point3 {
        Point3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    /// Distance from `p` to the farthest point of the box.
    #[inline]
    pub fn max_distance(&self, p: &Point3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.min[i]).abs().max((p[i] - self.max[i]).abs());
            d2 += d * d;
        }
        d2.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::f64::consts::FRAC_PI_2;

    fn rot_z(theta: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), theta).into_inner()
    }

    #[test]
    fn identity_pose_leaves_cloud_untouched() {
        let c = PointCloud::from_points(vec![Point3::new(1.0, -2.0, 3.5), Point3::new(0.1, 0.2, 0.3)]);
        assert_eq!(transform_cloud(&c, &Pose::identity()), c);
    }

    #[test]
    fn translation_and_rotation_examples() {
        let t = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let out = transform_cloud(&PointCloud::from_points(vec![Point3::origin()]), &t);
        assert_eq!(out.points[0], Point3::new(1.0, 0.0, 0.0));

        let r = Pose::new(rot_z(FRAC_PI_2), Vector3::zeros()).unwrap();
        let p = r.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_rotations() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 0.01;
        assert!(matches!(Pose::new(m, Vector3::zeros()), Err(GeometryError::NotOrthonormal(_))));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(Pose::new(reflect, Vector3::zeros()), Err(GeometryError::Reflection(_))));
        let mut nan = Matrix3::identity();
        nan[(2, 2)] = f64::NAN;
        assert!(Pose::new(nan, Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_builds_optical_frame() {
        let pose = Pose::look_at(Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0), Vector3::z()).unwrap();
        // Optical axis maps to world +y, image-down to world -z.
        assert_relative_eq!(pose.transform_vector(&Vector3::z()), Vector3::y(), epsilon = 1e-12);
        assert_relative_eq!(pose.transform_vector(&Vector3::y()), -Vector3::z(), epsilon = 1e-12);
        assert!(Pose::look_at(Point3::origin(), Point3::new(0.0, 0.0, 1.0), Vector3::z()).is_err());
    }

    #[test]
    fn frustum_membership_examples() {
        let intr = CameraIntrinsics::new(1.0, 0.8, 0.2, 3.0).unwrap();
        let pose = Pose::identity();
        let mid = 0.5 * (intr.near + intr.far);
        assert!(in_frustum(&Point3::new(0.0, 0.0, mid), &pose, &intr));
        assert!(!in_frustum(&Point3::new(0.0, 0.0, -1.0), &pose, &intr));
        assert!(!in_frustum(&Point3::new(0.0, 0.0, intr.far * 1.01), &pose, &intr));
        // Far plane inclusive, near plane exclusive.
        assert!(in_frustum(&Point3::new(0.0, 0.0, intr.far), &pose, &intr));
        assert!(!in_frustum(&Point3::new(0.0, 0.0, intr.near), &pose, &intr));
        // Angular edge inclusive.
        let x = 2.0 * intr.tan_half_horizontal();
        assert!(in_frustum(&Point3::new(x, 0.0, 2.0), &pose, &intr));
        assert!(!in_frustum(&Point3::new(x * 1.001, 0.0, 2.0), &pose, &intr));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.1, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, std::f64::consts::PI, 0.1, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(CameraIntrinsics::default().validate().is_ok());
    }

    #[test]
    fn downsample_examples() {
        let close = PointCloud::from_points(vec![Point3::new(0.01, 0.01, 0.01), Point3::new(0.011, 0.01, 0.01)]);
        let out = voxel_downsample(&close, 0.05).unwrap();
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out.points[0], Point3::new(0.0105, 0.01, 0.01), epsilon = 1e-15);

        let apart = PointCloud::from_points(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        assert_eq!(voxel_downsample(&apart, 0.05).unwrap().len(), 2);
        assert!(voxel_downsample(&PointCloud::new(), 0.05).unwrap().is_empty());
        assert!(voxel_downsample(&apart, 0.0).is_err());
        assert!(voxel_downsample(&apart, f64::NAN).is_err());
    }

    #[test]
    fn downsample_matches_hash_set_occupancy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let origin = Vector3::new(0.03, -0.07, 0.41);
        let pts: Vec<Point3> = (0..1000)
            .map(|_| Point3::from(origin + Vector3::new(rng.random::<f64>(), rng.random(), rng.random()) * 0.1))
            .collect();
        let occupied: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| ((p.x / 0.1).floor() as i64, (p.y / 0.1).floor() as i64, (p.z / 0.1).floor() as i64))
            .collect();
        let out = voxel_downsample(&PointCloud::from_points(pts), 0.1).unwrap();
        assert_eq!(out.len(), occupied.len());
        assert!((1..=8).contains(&out.len()));
    }

    #[test]
    fn downsample_keeps_first_color() {
        let cloud = PointCloud::with_colors(
            vec![Point3::new(0.001, 0.0, 0.0), Point3::new(0.002, 0.0, 0.0)],
            vec![[1, 2, 3], [4, 5, 6]],
        );
        let out = voxel_downsample(&cloud, 0.1).unwrap();
        assert_eq!(out.colors, Some(vec![[1, 2, 3]]));
    }

    #[test]
    fn sanitize_drops_invalid_returns() {
        let mut frame = SensorFrame {
            cloud: PointCloud::from_points(vec![
                Point3::new(0.0, 0.0, 1.0),
                Point3::new(f64::NAN, 0.0, 1.0),
                Point3::new(0.0, f64::INFINITY, 1.0),
                Point3::new(0.0, 0.0, 0.0),
            ]),
            pose: Pose::identity(),
            intrinsics: CameraIntrinsics::default(),
            timestamp: 0.0,
        };
        assert_eq!(frame.sanitize(), 3);
        assert_eq!(frame.cloud.len(), 1);
    }

    #[test]
    fn aabb_distance() {
        let b = Aabb::new(Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0));
        assert_eq!(b.distance(&Point3::new(0.5, 0.5, 0.5)), 0.0);
        assert_relative_eq!(b.distance(&Point3::new(2.0, 0.5, 0.5)), 1.0);
        assert_relative_eq!(b.distance(&Point3::new(2.0, 2.0, 0.5)), 2f64.sqrt());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-1.0f64..1.0), -3.1f64..3.1, prop::array::uniform3(-5.0f64..5.0)).prop_map(
            |(axis, angle, t)| {
                let axis = Vector3::from(axis);
                let rot = match nalgebra::Unit::try_new(axis, 1e-6) {
                    Some(a) => nalgebra::Rotation3::from_axis_angle(&a, angle).into_inner(),
                    None => Matrix3::identity(),
                };
                Pose::new(rot, Vector3::from(t)).unwrap()
            },
        )
    }

    fn arb_point(scale: f64) -> impl Strategy<Value = Point3> {
        prop::array::uniform3(-scale..scale).prop_map(|a| Point3::from(Vector3::from(a)))
    }

    proptest! {
        #[test]
        fn transform_then_inverse_roundtrips(pose in arb_pose(), pts in prop::collection::vec(arb_point(10.0), 0..20)) {
            let c = PointCloud::from_points(pts);
            let back = transform_cloud(&transform_cloud(&c, &pose), &pose.inverse());
            for (a, b) in c.points.iter().zip(&back.points) {
                prop_assert!((a - b).amax() < 1e-9);
            }
        }

        #[test]
        fn frustum_invariant_under_rigid_motion(cam in arb_pose(), motion in arb_pose(), p in arb_point(6.0)) {
            let intr = CameraIntrinsics::default();
            let moved_cam = motion.compose(&cam);
            let moved_p = motion.transform_point(&p);
            // Skip points numerically on a boundary.
            let local = cam.inverse_transform_point(&p);
            let margin = [
                (local.z - intr.near).abs(),
                (local.z - intr.far).abs(),
                (local.x.abs() - local.z * intr.tan_half_horizontal()).abs(),
                (local.y.abs() - local.z * intr.tan_half_vertical()).abs(),
            ];
            prop_assume!(margin.iter().all(|m| *m > 1e-9));
            prop_assert_eq!(in_frustum(&p, &cam, &intr), in_frustum(&moved_p, &moved_cam, &intr));
        }

        #[test]
        fn downsample_shrinks_and_is_idempotent(pts in prop::collection::vec(arb_point(1.0), 0..200), res in 0.02f64..0.5) {
            let c = PointCloud::from_points(pts);
            let once = voxel_downsample(&c, res).unwrap();
            prop_assert!(once.len() <= c.len());
            let twice = voxel_downsample(&once, res).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
