//! Ray-cast depth camera over analytic scenes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scene::{cast_shapes, Scene, SceneError};
use crate::geometry::{Point3, PointCloud, SensorFrame, Vector3};

/// Camera-frame ray direction (z = 1) through the center of pixel `(i, j)`.
pub fn pixel_ray(scene: &Scene, i: usize, j: usize) -> Vector3 {
    let th = scene.intrinsics.tan_half_horizontal();
    let tv = scene.intrinsics.tan_half_vertical();
    let u = -th + (i as f64 + 0.5) * 2.0 * th / scene.width as f64;
    let v = -tv + (j as f64 + 0.5) * 2.0 * tv / scene.height as f64;
    Vector3::new(u, v, 1.0)
}

/// Renders the scene at time `t`: one ray per pixel, nearest hit per ray, in
/// the camera frame. `noise` adds Gaussian depth noise with the given sigma.
pub fn render_frame<R: Rng>(scene: &Scene, t: f64, noise: Option<(f64, &mut R)>) -> Result<SensorFrame, SceneError> {
    let pose = scene.camera_pose(t)?;
    let shapes = scene.shapes_at(t);
    let eye = pose.position();
    let intr = &scene.intrinsics;
    let mut normal = match noise {
        Some((sigma, rng)) if sigma > 0.0 => {
            let dist = Normal::new(0.0, sigma).map_err(|e| SceneError::Invalid(format!("depth noise: {e}")))?;
            Some((dist, rng))
        }
        _ => None,
    };
    let mut cloud = PointCloud::new();
    for j in 0..scene.height {
        for i in 0..scene.width {
            let dir_cam = pixel_ray(scene, i, j);
            let dir = pose.transform_vector(&dir_cam);
            // Parameter s along a z = 1 ray equals the camera depth.
            let Some((mut depth, prim)) = cast_shapes(&shapes, &eye, &dir, 0.0) else {
                continue;
            };
            if let Some((dist, rng)) = normal.as_mut() {
                depth += dist.sample(*rng);
            }
            if depth <= intr.near || depth > intr.far {
                continue;
            }
            cloud.push(Point3::from(dir_cam * depth), Some(scene.primitives[prim].color));
        }
    }
    Ok(SensorFrame { cloud, pose, intrinsics: *intr, timestamp: t })
}

/// Noiseless rendering helper.
pub fn render_clean(scene: &Scene, t: f64) -> Result<SensorFrame, SceneError> {
    render_frame::<rand_chacha::ChaCha8Rng>(scene, t, None)
}

/// Depth of the first surface along the camera-frame ray `dir_cam` (z = 1),
/// or `None` when the ray escapes.
pub fn first_hit_depth(scene: &Scene, t: f64, pose: &crate::geometry::Pose, dir_cam: &Vector3) -> Option<f64> {
    cast_shapes(&scene.shapes_at(t), &pose.position(), &pose.transform_vector(dir_cam), 0.0).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform_cloud;
    use crate::sim::scene::{CameraKeyframe, Primitive, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn facing(shapes: Vec<Shape>, width: usize, height: usize) -> Scene {
        Scene {
            primitives: shapes.into_iter().map(|shape| Primitive { shape, color: [1, 2, 3], motion: vec![] }).collect(),
            camera: vec![CameraKeyframe { t: 0.0, position: [0.0, 0.0, 0.0], target: [1.0, 0.0, 0.0] }],
            intrinsics: Default::default(),
            width,
            height,
            frame_rate: 10.0,
            duration: 0.0,
        }
    }

    #[test]
    fn plane_at_one_meter() {
        let scene = facing(vec![Shape::Plane { normal: [1.0, 0.0, 0.0], offset: 1.0 }], 161, 121);
        let frame = render_clean(&scene, 0.0).unwrap();
        assert_eq!(frame.cloud.len(), 161 * 121);
        let center = frame.cloud.points[60 * 161 + 80];
        assert!(center.x.abs() < 1e-15 && center.y.abs() < 1e-15);
        assert!((center.z - 1.0).abs() < 1e-12);
        assert_eq!(frame.cloud.color(0), Some([1, 2, 3]));
    }

    #[test]
    fn sphere_behind_camera_is_invisible() {
        let scene = facing(vec![Shape::Sphere { center: [-2.0, 0.0, 0.0], radius: 0.5 }], 40, 30);
        assert!(render_clean(&scene, 0.0).unwrap().cloud.is_empty());
    }

    #[test]
    fn sphere_on_axis_hits_satisfy_implicit_equation() {
        let (d, r) = (2.0, 0.3);
        let shape = Shape::Sphere { center: [d, 0.0, 0.0], radius: r };
        let scene = facing(vec![shape.clone()], 161, 121);
        let frame = render_clean(&scene, 0.0).unwrap();
        let center =
            frame.cloud.points.iter().min_by(|a, b| a.coords.xy().norm().total_cmp(&b.coords.xy().norm())).unwrap();
        assert!(center.coords.xy().norm() < 1e-12);
        assert!((center.z - (d - r)).abs() < 1e-12);
        let world = transform_cloud(&frame.cloud, &frame.pose);
        assert!(world.len() > 100);
        for p in &world.points {
            assert!(shape.residual(p).abs() < 1e-9);
        }
    }

    #[test]
    fn ball_scene_hits_lie_on_primitives() {
        let scene = Scene::ball_on_table();
        for t in [0.0, 2.2, 5.0] {
            let frame = render_clean(&scene, t).unwrap();
            let world = transform_cloud(&frame.cloud, &frame.pose);
            let shapes = scene.shapes_at(t);
            assert!(world.len() > 5000);
            for p in &world.points {
                let best = shapes.iter().map(|s| s.residual(p).abs()).fold(f64::INFINITY, f64::min);
                assert!(best < 1e-9, "residual {best}");
            }
        }
    }

    #[test]
    fn noise_is_seeded() {
        let scene = Scene::ball_on_table();
        let a = render_frame(&scene, 1.0, Some((0.002, &mut ChaCha8Rng::seed_from_u64(3)))).unwrap();
        let b = render_frame(&scene, 1.0, Some((0.002, &mut ChaCha8Rng::seed_from_u64(3)))).unwrap();
        let clean = render_clean(&scene, 1.0).unwrap();
        assert_eq!(a.cloud.points, b.cloud.points);
        assert_ne!(a.cloud.points, clean.cloud.points);
    }
}
