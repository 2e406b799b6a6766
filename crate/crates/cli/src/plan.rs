//! The `plan` subcommand: reactive rollouts and trajectory optimization.

use std::path::Path;

use anyhow::{anyhow, Context};
use gpdf::io;
use gpdf::planning::{ChompResult, ReactiveStepper, Rollout};
use gpdf::sim::render_clean;
use gpdf::sim::Scene;
use gpdf::{
    chomp_optimize, ChompParams, FusionParams, KernelParams, OctreeConfig, OctreeStore, Point3, ReactiveParams,
    SphereBody, Trajectory,
};
use serde::{Deserialize, Serialize};

use crate::{load_scene, say, store_from_ply, Classify, Failure, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Reactive,
    Chomp,
}

/// Start, goal and planner settings, read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub start: [f64; 3],
    pub goal: [f64; 3],
    /// Training resolution of the map, meters.
    pub resolution: f64,
    /// Scene time up to which frames are fused before optimizing. Reactive
    /// runs on a live scene instead fuse one frame per step.
    pub time: Option<f64>,
    pub reactive: ReactiveParams,
    pub max_steps: usize,
    pub chomp: ChompParams,
    pub waypoints: usize,
    pub body: SphereBody,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            start: [0.0; 3],
            goal: [0.0; 3],
            resolution: 0.01,
            time: None,
            reactive: ReactiveParams::default(),
            max_steps: 1000,
            chomp: ChompParams::default(),
            waypoints: 50,
            body: SphereBody::default(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Outcome<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).config()?;
        let s: Scenario =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).config()?;
        let finite = |p: &[f64; 3]| p.iter().all(|v| v.is_finite());
        if !finite(&s.start) || !finite(&s.goal) {
            return Err(Failure::Config(anyhow!("start and goal must be finite")));
        }
        FusionParams::for_resolution(s.resolution).validate().config()?;
        s.reactive.validate().config()?;
        s.chomp.validate().config()?;
        s.body.validate().config()?;
        if s.waypoints < 2 {
            return Err(Failure::Config(anyhow!("need at least 2 waypoints, got {}", s.waypoints)));
        }
        Ok(s)
    }

    fn start(&self) -> Point3 {
        Point3::from(self.start)
    }

    fn goal(&self) -> Point3 {
        Point3::from(self.goal)
    }
}

#[derive(Debug, Serialize)]
struct ReactiveSummary {
    reached: bool,
    steps: usize,
    min_clearance: f64,
    frames_fused: usize,
}

#[derive(Debug, Serialize)]
struct ChompSummary {
    iterations: usize,
    stop: gpdf::planning::StopReason,
    initial_cost: f64,
    final_cost: f64,
    min_clearance: f64,
    queries_per_evaluation: usize,
}

pub fn run(map: &str, scenario: &Path, mode: Mode, out: &Path) -> Outcome<()> {
    let scenario = Scenario::load(scenario)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).runtime()?;
    let is_ply = Path::new(map).extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let summary = if is_ply {
        let store = store_from_ply(Path::new(map), scenario.resolution)?;
        match mode {
            Mode::Reactive => reactive_static(&store, &scenario, out)?,
            Mode::Chomp => chomp(&store, &scenario, out)?,
        }
    } else {
        let scene = load_scene(map)?;
        match mode {
            Mode::Reactive => reactive_live(&scene, &scenario, out)?,
            Mode::Chomp => {
                let t = scenario.time.unwrap_or(0.0);
                let store = fuse_until(&scene, &scenario, t)?;
                chomp(&store, &scenario, out)?
            }
        }
    };
    std::fs::write(out.join("summary.json"), &summary)
        .with_context(|| format!("writing {}", out.display()))
        .runtime()?;
    say(&summary)
}

fn empty_store(scenario: &Scenario) -> Outcome<OctreeStore> {
    OctreeStore::new(OctreeConfig::default(), KernelParams::default(), scenario.resolution).config()
}

/// Fuses noiseless frames of the scene from its start up to `t`.
fn fuse_until(scene: &Scene, scenario: &Scenario, t: f64) -> Outcome<OctreeStore> {
    scene.validate().config()?;
    let params = FusionParams::for_resolution(scenario.resolution);
    let mut store = empty_store(scenario)?;
    for time in scene.frame_times().into_iter().filter(|&s| s <= t + 1e-9) {
        let frame = render_clean(scene, time).runtime()?;
        store.integrate_frame(&frame, &params).runtime()?;
    }
    Ok(store)
}

fn write_rollout(rollout: &Rollout, frames_fused: usize, out: &Path) -> Outcome<String> {
    io::write_trajectory_csv(&out.join("trajectory.csv"), &rollout.path).runtime()?;
    let summary = ReactiveSummary {
        reached: rollout.reached,
        steps: rollout.steps,
        min_clearance: rollout.min_clearance,
        frames_fused,
    };
    serde_json::to_string_pretty(&summary).runtime()
}

fn reactive_static(store: &OctreeStore, scenario: &Scenario, out: &Path) -> Outcome<String> {
    let rollout =
        gpdf::reactive_rollout(scenario.start(), scenario.goal(), store, &scenario.reactive, scenario.max_steps)
            .config()?;
    write_rollout(&rollout, 0, out)
}

/// One frame per step while the scene lasts; after that the map is frozen.
fn reactive_live(scene: &Scene, scenario: &Scenario, out: &Path) -> Outcome<String> {
    scene.validate().config()?;
    let params = FusionParams::for_resolution(scenario.resolution);
    let mut store = empty_store(scenario)?;
    let mut stepper = ReactiveStepper::new(scenario.start(), scenario.goal(), scenario.reactive).config()?;
    let times = scene.frame_times();
    let mut fused = 0;
    for k in 0..scenario.max_steps {
        if let Some(&t) = times.get(k) {
            let frame = render_clean(scene, t).runtime()?;
            store.integrate_frame(&frame, &params).runtime()?;
            fused += 1;
        }
        if stepper.step(&store) {
            break;
        }
    }
    write_rollout(&stepper.finish(), fused, out)
}

fn chomp(store: &OctreeStore, scenario: &Scenario, out: &Path) -> Outcome<String> {
    let init = Trajectory::straight_line(scenario.start(), scenario.goal(), scenario.waypoints).config()?;
    let result: ChompResult = chomp_optimize(&init, &scenario.body, store, &scenario.chomp).runtime()?;
    io::write_trajectory_csv(&out.join("trajectory.csv"), result.trajectory.waypoints()).runtime()?;
    io::write_cost_csv(&out.join("cost.csv"), &result.cost_history).runtime()?;
    let centers = scenario.body.centers(&result.trajectory);
    let radii = scenario.body.spheres.iter().map(|s| s.radius).cycle();
    let min_clearance = gpdf::DistanceField::query_batch(store, &centers)
        .iter()
        .zip(radii)
        .map(|(s, r)| s.distance - r)
        .fold(f64::INFINITY, f64::min);
    let summary = ChompSummary {
        iterations: result.iterations,
        stop: result.stop,
        initial_cost: result.cost_history[0],
        final_cost: *result.cost_history.last().expect("history starts with the initial cost"),
        min_clearance,
        queries_per_evaluation: result.queries_per_evaluation,
    };
    serde_json::to_string_pretty(&summary).runtime()
}
