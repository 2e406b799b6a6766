#![allow(dead_code)]

use gpdf::geometry::transform_cloud;
use gpdf::sim::render::render_clean;
use gpdf::sim::scene::{CameraKeyframe, Keyframe, Primitive, Scene, Shape};
use gpdf::{FusionParams, KernelParams, OctreeConfig, OctreeStore, Point3, Vector3};

/// Near-uniform points on a sphere with roughly `spacing` between neighbours.
pub fn fibonacci_sphere(center: Point3, radius: f64, spacing: f64) -> Vec<Point3> {
    let n = (4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing)).round() as usize;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            center + Vector3::new(rho * phi.cos(), rho * phi.sin(), z) * radius
        })
        .collect()
}

/// A free-floating sphere seen by a camera circling it at a fixed height.
pub fn orbited_sphere(center: [f64; 3], radius: f64) -> Scene {
    let cam = |t: f64, x: f64, y: f64| CameraKeyframe {
        t,
        position: [center[0] + x, center[1] + y, center[2] + 0.4],
        target: center,
    };
    Scene {
        primitives: vec![Primitive { shape: Shape::Sphere { center, radius }, color: [200, 60, 60], motion: vec![] }],
        camera: vec![
            cam(0.0, -1.0, -1.0),
            cam(1.0, 1.0, -1.0),
            cam(2.0, 1.0, 1.0),
            cam(3.0, -1.0, 1.0),
            cam(4.0, -1.0, -1.0),
        ],
        intrinsics: Default::default(),
        width: 160,
        height: 120,
        frame_rate: 5.0,
        duration: 4.0,
    }
}

/// The default table scene with the ball parked at `a` until `t_jump`, then at `b`.
pub fn ball_jump(a: [f64; 2], b: [f64; 2], t_jump: f64) -> Scene {
    let mut scene = Scene::ball_on_table();
    scene.primitives[1].motion = vec![
        Keyframe { t: 0.0, translation: [a[0], a[1], 0.0] },
        Keyframe { t: t_jump - 1e-6, translation: [a[0], a[1], 0.0] },
        Keyframe { t: t_jump, translation: [b[0], b[1], 0.0] },
    ];
    scene
}

pub fn new_store(resolution: f64) -> OctreeStore {
    OctreeStore::new(OctreeConfig::default(), KernelParams::default(), resolution).unwrap()
}

/// Fuses noiseless renders of `scene` at the given times.
pub fn fuse_times(store: &mut OctreeStore, scene: &Scene, times: &[f64], params: &FusionParams) {
    for &t in times {
        let frame = render_clean(scene, t).unwrap();
        store.integrate_frame(&frame, params).unwrap();
    }
}

/// Noiseless world-frame hits of one render.
pub fn world_hits(scene: &Scene, t: f64) -> Vec<Point3> {
    let frame = render_clean(scene, t).unwrap();
    transform_cloud(&frame.cloud, &frame.pose).points
}

/// Outcome of one scripted crossing.
pub struct Crossing {
    pub rollout: gpdf::planning::Rollout,
    /// Smallest true distance from the agent to the obstacle surface.
    pub true_clearance: f64,
}

/// A sphere crosses the straight path of a reactive agent. Every step renders
/// one frame, fuses it into a live store and moves the agent once.
pub fn crossing_trial(seed: u64, params: &gpdf::ReactiveParams) -> Crossing {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let radius = 0.1;
    let height = 0.3;
    let speed = rng.random_range(0.2..0.4);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let t_cross = rng.random_range(1.0..2.0);
    let x_cross = rng.random_range(-0.2..0.2);
    let y_at = |t: f64| side * speed * (t - t_cross);
    let scene = Scene {
        primitives: vec![Primitive {
            shape: Shape::Sphere { center: [0.0, 0.0, height], radius },
            color: [30, 200, 30],
            motion: vec![
                Keyframe { t: 0.0, translation: [x_cross, y_at(0.0), 0.0] },
                Keyframe { t: 6.0, translation: [x_cross, y_at(6.0), 0.0] },
            ],
        }],
        camera: vec![CameraKeyframe { t: 0.0, position: [0.0, -1.0, 1.5], target: [0.0, 0.0, height] }],
        intrinsics: Default::default(),
        width: 80,
        height: 60,
        frame_rate: 10.0,
        duration: 6.0,
    };
    let resolution = 0.02;
    let fusion = FusionParams::for_resolution(resolution);
    let mut store = new_store(resolution);
    let start = Point3::new(-0.75, 0.0, height);
    let goal = Point3::new(0.75, 0.0, height);
    let mut stepper = gpdf::planning::ReactiveStepper::new(start, goal, *params).unwrap();
    let mut true_clearance = f64::INFINITY;
    for k in 0..60 {
        let t = k as f64 / scene.frame_rate;
        store.integrate_frame(&render_clean(&scene, t).unwrap(), &fusion).unwrap();
        true_clearance = true_clearance.min(scene.ground_truth(t, &stepper.position()).distance);
        if stepper.step(&store) {
            break;
        }
    }
    Crossing { rollout: stepper.finish(), true_clearance }
}
