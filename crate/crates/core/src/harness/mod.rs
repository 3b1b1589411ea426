//! Synthetic problems, benchmarks, file I/O and the command-line layer.

mod bench;
mod io;
mod scene;

pub use bench::{
    oracle_bundle, run_benchmark, run_benchmark_with, run_scene, BenchmarkReport, MetricDefinitions, SceneRecord,
    SuiteConfig, SuiteStats,
};
pub use io::{load_cloud, random_subsample, save_cloud, save_result, voxel_downsample, PREPROCESS_POINTS, VOXEL_SIZE};
pub use scene::{generate_scene, level_camera, perturb_problem, PerturbConfig, SceneGenConfig, SceneMeta, ScenePair};
pub mod cli;
