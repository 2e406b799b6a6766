//! Synthetic depth camera, ground truth, metrics, datasets and run harness.

pub mod dataset;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scene;

pub use dataset::{load_dataset, write_dataset, Dataset, DatasetError, DatasetFrame};
pub use metrics::{cosine_similarity, evaluate, sample_query_set, MetricsError, MetricsReport};
pub use pipeline::{
    bench_resolutions, run_dataset, run_frames, run_scene, BenchRow, PipelineConfig, PipelineError, PipelineRun,
    RunSummary,
};
pub use render::{render_clean, render_frame};
pub use scene::{Scene, SceneError, Shape};
