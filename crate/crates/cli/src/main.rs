//! `gpdf`: simulate, replay, query, plan and benchmark GP distance fields.
//!
//! Exit codes: 0 on success, 1 when the inputs or parameters are invalid,
//! 2 when a valid run fails part way.

mod plan;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use gpdf::io::{self, QueryGrid};
use gpdf::sim::pipeline::{self, PipelineConfig, PipelineError};
use gpdf::sim::{load_dataset, Scene};
use gpdf::{DistanceField, FusionParams, KernelParams, OctreeConfig, OctreeStore};

#[derive(Debug, Parser)]
#[command(name = "gpdf", version, about = "Gaussian-process distance fields from depth streams")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic scenes.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Fuse a recorded dataset of PLY frames and poses.
    Replay {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        resolution: f64,
        #[arg(long)]
        out: PathBuf,
        /// Scene to score the final map against.
        #[arg(long)]
        truth: Option<String>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Evaluate the field of a stored map on a planar grid.
    Query {
        #[arg(long)]
        map: PathBuf,
        /// JSON with origin, u_axis, v_axis, spacing, u_count, v_count.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training resolution used to rebuild the field from the map.
        #[arg(long, default_value_t = 0.01)]
        resolution: f64,
    },
    /// Plan through a stored map or a live scene.
    Plan {
        /// A PLY map, or a scene (JSON file or built-in name) fused live.
        #[arg(long)]
        map: String,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: plan::Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and timing across training resolutions.
    Bench {
        #[arg(long)]
        scene: String,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.10,0.15,0.20,0.30")]
        resolutions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noise: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
enum SimCommand {
    /// Render, fuse and evaluate every frame of a scene.
    Run {
        /// Scene JSON file, or `ball_on_table` / `static_room`.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        resolution: f64,
        /// Fusion threshold; defaults to five times the resolution.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Depth noise sigma in meters (default 0.002).
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        max_frames: Option<usize>,
    },
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// Tags an error with its exit class.
pub trait Classify<T> {
    fn config(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Outcome<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    if e.is_config() {
        Failure::Config(e.into())
    } else {
        Failure::Runtime(e.into())
    }
}

/// A scene from a JSON file, or one of the built-in scenes by name.
pub fn load_scene(spec: &str) -> Outcome<Scene> {
    match spec {
        "ball_on_table" => Ok(Scene::ball_on_table()),
        "static_room" => Ok(Scene::static_room()),
        path => Scene::load(Path::new(path)).with_context(|| format!("loading scene {path}")).config(),
    }
}

fn run_config(resolution: f64, eta: Option<f64>, seed: u64, noise: Option<f64>) -> Outcome<PipelineConfig> {
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(Failure::Config(anyhow!("resolution must be > 0, got {resolution}")));
    }
    let mut config = PipelineConfig::for_resolution(resolution);
    config.seed = seed;
    if let Some(eta) = eta {
        config.fusion.eta = eta;
    }
    if let Some(noise) = noise {
        config.depth_noise = noise;
    }
    config.validate().map_err(pipeline_failure)?;
    Ok(config)
}

/// Writes one line to stdout. A closed pipe (`gpdf ... | head`) is not an error.
pub fn say(text: &str) -> Outcome<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Runtime(e.into())),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Outcome<()> {
    say(&serde_json::to_string_pretty(value).runtime()?)
}

fn sim_run(scene: &str, config: PipelineConfig, out: &Path) -> Outcome<()> {
    let scene = load_scene(scene)?;
    let run = pipeline::run_scene(&scene, &config).map_err(pipeline_failure)?;
    pipeline::write_artifacts(out, &run, None).map_err(pipeline_failure)?;
    print_json(&run.summary)
}

fn replay(dataset: &Path, config: PipelineConfig, truth: Option<&str>, out: &Path) -> Outcome<()> {
    let truth = truth.map(load_scene).transpose()?;
    let dataset = load_dataset(dataset).with_context(|| format!("reading dataset {}", dataset.display())).config()?;
    log::info!("{} frames", dataset.len());
    let run = pipeline::run_dataset(dataset, &config, truth.as_ref()).map_err(pipeline_failure)?;
    pipeline::write_artifacts(out, &run, None).map_err(pipeline_failure)?;
    print_json(&run.summary)
}

/// Rebuilds a store from a PLY map.
pub fn store_from_ply(map: &Path, resolution: f64) -> Outcome<OctreeStore> {
    let cloud = io::read_ply(map).with_context(|| format!("reading map {}", map.display())).config()?;
    let mut store = OctreeStore::new(OctreeConfig::default(), KernelParams::default(), resolution).config()?;
    let stored = store.insert_cloud(&cloud);
    log::info!("{} of {} map points stored", stored, cloud.len());
    Ok(store)
}

fn query(map: &Path, grid: &Path, resolution: f64, out: &Path) -> Outcome<()> {
    let grid = QueryGrid::load(grid).config()?;
    let store = store_from_ply(map, resolution)?;
    let points = grid.points();
    let samples = store.query_batch(&points);
    io::write_samples_csv(out, &points, &samples).runtime()?;
    say(&format!("{} samples written to {}", points.len(), out.display()))
}

fn bench(scene: &str, resolutions: &[f64], seed: u64, noise: Option<f64>, out: &Path) -> Outcome<()> {
    if resolutions.is_empty() {
        return Err(Failure::Config(anyhow!("no resolutions given")));
    }
    for &r in resolutions {
        FusionParams::for_resolution(r).validate().config()?;
    }
    let scene = load_scene(scene)?;
    let base = run_config(resolutions[0], None, seed, noise)?;
    let rows = pipeline::bench_resolutions(&scene, resolutions, &base).map_err(pipeline_failure)?;
    io::write_rows_csv(out, &rows).runtime()?;
    for r in &rows {
        say(&format!(
            "{:.3} m: rmse {:.4} m, baseline {:.4} m, {} points",
            r.resolution, r.rmse, r.baseline_rmse, r.store_size
        ))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Sim { command: SimCommand::Run { scene, resolution, eta, out, seed, noise, max_frames } } => {
            let mut config = run_config(resolution, eta, seed, noise)?;
            config.max_frames = max_frames;
            sim_run(&scene, config, &out)
        }
        Command::Replay { dataset, resolution, out, truth, eta } => {
            let mut config = run_config(resolution, eta, 0, None)?;
            config.depth_noise = 0.0;
            replay(&dataset, config, truth.as_deref(), &out)
        }
        Command::Query { map, grid, out, resolution } => query(&map, &grid, resolution, &out),
        Command::Plan { map, scenario, mode, out } => plan::run(&map, &scenario, mode, &out),
        Command::Bench { scene, resolutions, out, seed, noise } => bench(&scene, &resolutions, seed, noise, &out),
    }
}

/// The error chain, skipping causes whose text an outer message already shows.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let code = failure.code();
            let (Failure::Config(e) | Failure::Runtime(e)) = failure;
            eprintln!("error: {}", describe(&e));
            ExitCode::from(code)
        }
    }
}
