//! Command implementations behind the `costpose` binary. Each command reads
//! one JSON config (all fields optional), a seed and an output path.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::bench::{oracle_bundle, run_benchmark};
use super::io::{
    load_cloud, random_subsample, save_cloud, save_result, voxel_downsample, PREPROCESS_POINTS, VOXEL_SIZE,
};
use super::scene::{generate_scene, perturb_problem, PerturbConfig, SceneGenConfig, SceneMeta, ScenePair};
use super::SuiteConfig;
use crate::engine::{register, EngineConfig, PreparedScene, WeightingFlags};
use crate::error::{invalid, Error, Result};
use crate::features::{FeatureMap2D, FeatureProvider, FeatureSet3D, OracleFeatureConfig, TensorFileProvider};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::losses::{
    circle_loss, cross_entropy_scores, focal_loss, grad_check, CircleLossConfig, CorrespondenceSets, FocalConfig,
};
use crate::scoring::{train_scorer, write_loss_csv, ScorerArch, ScorerParams, TrainConfig};
use crate::util::{derive_seed, to_rounded_json};

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(Error),
    NoOverlap(Error),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NoOverlap(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            CliError::Config(e) | CliError::NoOverlap(e) | CliError::Runtime(e) => e,
        }
    }
}

fn runtime(e: Error) -> CliError {
    match e {
        Error::NoOverlap { .. } => CliError::NoOverlap(e),
        Error::InvalidInput(_) | Error::Json(_) => CliError::Config(e),
        other => CliError::Runtime(other),
    }
}

/// Parses the config file, or the defaults when no file is given.
pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(e.into()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(e.into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_result(value, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub scene: SceneGenConfig,
    pub perturb: PerturbConfig,
    pub features: OracleFeatureConfig,
    /// Also write the oracle feature tensors next to each cloud.
    pub write_features: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 1,
            scene: SceneGenConfig::default(),
            perturb: PerturbConfig::default(),
            features: OracleFeatureConfig::default(),
            write_features: true,
        }
    }
}

/// `meta.json` of a synthesized scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(flatten)]
    pub meta: SceneMeta,
    pub initial_pose: Pose,
}

pub const CLOUD_FILE: &str = "cloud.xyz";
pub const META_FILE: &str = "meta.json";

/// Writes `scene_NNNN/{cloud.xyz, meta.json, *.bin}` under `out`.
pub fn synth(config: &SynthConfig, seed: u64, out: &Path) -> std::result::Result<(), CliError> {
    if config.scenes == 0 {
        return Err(CliError::Config(invalid("scenes must be >= 1")));
    }
    config.scene.validate().map_err(CliError::Config)?;
    config.features.validate().map_err(CliError::Config)?;
    for i in 0..config.scenes {
        let scene_seed = derive_seed(seed, i as u64);
        let mut scene = generate_scene(&config.scene, scene_seed).map_err(runtime)?;
        scene.scene_id = i as u64;
        let initial = perturb_problem(&scene, &config.perturb, scene_seed).map_err(runtime)?;
        let dir = out.join(format!("scene_{i:04}"));
        std::fs::create_dir_all(&dir).map_err(|e| runtime(e.into()))?;
        save_cloud(&dir.join(CLOUD_FILE), &scene.cloud).map_err(runtime)?;
        let file = SceneFile {
            meta: scene.meta(),
            initial_pose: initial,
        };
        write_json(&dir.join(META_FILE), &file).map_err(runtime)?;
        if config.write_features {
            let bundle = oracle_bundle(&scene, &config.features).map_err(runtime)?;
            TensorFileProvider::new(&dir).save(&bundle).map_err(runtime)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RegisterConfig {
    /// Directory written by `synth`; when absent a scene is generated from
    /// `scene` and the seed.
    pub scene_dir: Option<PathBuf>,
    /// Directory with the four feature tensors; when absent oracle features
    /// are computed from the scene's ground truth.
    pub feature_dir: Option<PathBuf>,
    /// Voxel-downsample and subsample a loaded cloud (oracle features only).
    pub preprocess: bool,
    pub scene: SceneGenConfig,
    pub perturb: PerturbConfig,
    pub features: OracleFeatureConfig,
    pub engine: EngineConfig,
}

fn load_scene(config: &RegisterConfig, seed: u64) -> Result<(ScenePair, Option<Pose>)> {
    match &config.scene_dir {
        None => {
            let scene = generate_scene(&config.scene, seed)?;
            Ok((scene, None))
        }
        Some(dir) => {
            let text = std::fs::read_to_string(dir.join(META_FILE))?;
            let file: SceneFile = serde_json::from_str(&text)?;
            let mut cloud = load_cloud(&dir.join(CLOUD_FILE))?;
            if config.preprocess {
                if config.feature_dir.is_some() {
                    return Err(invalid("preprocess changes the point set; use oracle features with it"));
                }
                cloud = voxel_downsample(&cloud, VOXEL_SIZE)?;
                cloud = random_subsample(&cloud, PREPROCESS_POINTS, seed)?;
            }
            let scene = ScenePair {
                cloud,
                intrinsics: file.meta.intrinsics,
                gt_pose: file.meta.gt_pose,
                scene_id: file.meta.scene_id,
                seed: file.meta.seed,
            };
            Ok((scene, Some(file.initial_pose)))
        }
    }
}

/// Registers one scene and writes the result JSON to `out`.
pub fn register_command(config: &RegisterConfig, seed: u64, out: &Path) -> std::result::Result<(), CliError> {
    config.engine.validate().map_err(CliError::Config)?;
    let (scene, stored_initial) = load_scene(config, seed).map_err(runtime)?;
    let bundle = match &config.feature_dir {
        Some(dir) => TensorFileProvider::new(dir).provide(&scene),
        None => oracle_bundle(&scene, &config.features),
    }
    .map_err(runtime)?;
    let initial = match (config.engine.initial_pose, stored_initial) {
        (Some(p), _) => p,
        (None, Some(p)) => p,
        (None, None) => perturb_problem(&scene, &config.perturb, seed).map_err(runtime)?,
    };
    let prepared = PreparedScene::new(
        scene.cloud,
        scene.intrinsics,
        bundle,
        config.engine.zoif_enabled,
        config.engine.weighting,
        Some(scene.gt_pose),
    )
    .map_err(runtime)?;
    let result = register(&prepared, &initial, &config.engine).map_err(runtime)?;
    write_json(out, &result).map_err(runtime)
}

/// Runs a suite and writes `report.json` and `scenes.jsonl` under `out`.
/// The seed replaces the suite seed in the config.
pub fn bench(config: &SuiteConfig, seed: u64, out: &Path) -> std::result::Result<(), CliError> {
    let mut config = config.clone();
    config.seed = seed;
    config.validate().map_err(CliError::Config)?;
    let report = run_benchmark(&config).map_err(runtime)?;
    report.write(out).map_err(runtime)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainScorerConfig {
    pub scenes: usize,
    pub scene: SceneGenConfig,
    pub features: OracleFeatureConfig,
    pub zoif_enabled: bool,
    pub weighting: WeightingFlags,
    pub train: TrainConfig,
}

impl Default for TrainScorerConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            scene: SceneGenConfig {
                n_points: 2048,
                intrinsics: CameraIntrinsics::from_fov(16, 16, 80.0).expect("valid toy intrinsics"),
                ..Default::default()
            },
            features: OracleFeatureConfig {
                dim: 8,
                ..Default::default()
            },
            zoif_enabled: true,
            weighting: WeightingFlags::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Prepared scenes `0..count` of a training or evaluation set.
pub fn training_scenes(
    scene: &SceneGenConfig,
    features: &OracleFeatureConfig,
    zoif_enabled: bool,
    weighting: WeightingFlags,
    count: usize,
    seed: u64,
) -> Result<Vec<PreparedScene>> {
    (0..count)
        .map(|i| {
            let s = generate_scene(scene, derive_seed(seed, i as u64))?;
            let bundle = oracle_bundle(&s, features)?;
            PreparedScene::new(s.cloud, s.intrinsics, bundle, zoif_enabled, weighting, Some(s.gt_pose))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub parameters: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub final_learning_rate: f64,
}

/// Trains a scorer; writes `scorer.bin`, `loss.csv` and `summary.json`.
pub fn train_command(config: &TrainScorerConfig, seed: u64, out: &Path) -> std::result::Result<(), CliError> {
    let mut train = config.train.clone();
    train.seed = seed;
    train.validate().map_err(CliError::Config)?;
    if config.scenes == 0 {
        return Err(CliError::Config(invalid("scenes must be >= 1")));
    }
    let scenes = training_scenes(
        &config.scene,
        &config.features,
        config.zoif_enabled,
        config.weighting,
        config.scenes,
        seed,
    )
    .map_err(runtime)?;
    let report = train_scorer(&scenes, &train).map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(|e| runtime(e.into()))?;
    report.params.save(&out.join("scorer.bin")).map_err(runtime)?;
    write_loss_csv(&out.join("loss.csv"), &report.loss_curve).map_err(runtime)?;
    let summary = TrainSummary {
        steps: report.loss_curve.len(),
        parameters: report.params.num_params(),
        initial_eval_loss: report.initial_eval_loss,
        final_eval_loss: report.final_eval_loss,
        final_learning_rate: report.final_learning_rate,
    };
    write_json(&out.join("summary.json"), &summary).map_err(runtime)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    /// Random points per loss.
    pub points: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 20,
            epsilon: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub function: String,
    pub points: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

/// Finite-difference checks of every analytic gradient in the crate.
pub fn grad_check_report(config: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    if config.points == 0
        || config.epsilon.is_nan()
        || config.epsilon <= 0.0
        || config.tolerance.is_nan()
        || config.tolerance <= 0.0
    {
        return Err(invalid("points, epsilon and tolerance must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut push = |name: &str, worst: f64| {
        entries.push(GradCheckEntry {
            function: name.into(),
            points: config.points,
            max_relative_error: worst,
            passed: worst < config.tolerance,
        })
    };

    let mut worst: f64 = 0.0;
    for _ in 0..config.points {
        let n = rng.random_range(2..40);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = rng.random_range(0..n);
        worst = worst.max(grad_check(|s| cross_entropy_scores(s, t), &x, config.epsilon)?);
    }
    push("cross_entropy_scores", worst);

    let focal = FocalConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..config.points {
        let labels: Vec<f64> = (0..16).map(|_| f64::from(rng.random::<bool>())).collect();
        let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.02..0.98)).collect();
        worst = worst.max(grad_check(|x| focal_loss(x, &labels, &focal), &p, config.epsilon)?);
    }
    push("focal_loss", worst);

    // Circle loss on five anchors in a row with live weights, so the analytic
    // gradient is the true gradient of the loss. Each anchor has its
    // neighbours as positives and the rest as negatives.
    let circle = CircleLossConfig {
        radius: 1.5,
        detach_weights: false,
        ..Default::default()
    };
    let (h, w, dim, n) = (1, 5, 4, 5);
    let coords: Vec<(f64, f64)> = (0..n).map(|i| (i as f64 + 0.5, 0.5)).collect();
    let sets = CorrespondenceSets::from_projections((0..n).collect(), &coords, w, circle.radius)?;
    let split = h * w * dim;
    let loss = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let f2d = FeatureMap2D::new(h, w, dim, x[..split].to_vec())?;
        let f3d = FeatureSet3D::new(n, dim, x[split..].to_vec())?;
        let out = circle_loss(&f2d, &f3d, &sets, &circle)?;
        let mut g = out.grad_2d;
        g.extend(out.grad_3d);
        Ok((out.value, g))
    };
    let mut worst: f64 = 0.0;
    for _ in 0..config.points {
        let x: Vec<f64> = (0..split + n * dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        worst = worst.max(grad_check(loss, &x, config.epsilon)?);
    }
    push("circle_loss", worst);

    let arch = ScorerArch { widths: vec![4, 3, 2] };
    let (sh, sw, sc) = (5, 6, 4);
    let mut worst: f64 = 0.0;
    for k in 0..config.points {
        let params = ScorerParams::random(sc, &arch, derive_seed(seed, k as u64))?;
        let input: Vec<f64> = (0..sc * sh * sw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut p = params.clone();
            p.set_from_slice(theta)?;
            let (s, cache) = p.forward(&input, sh, sw)?;
            Ok((s, p.backward(&cache, 1.0)))
        };
        worst = worst.max(grad_check(f, &params.to_vec(), config.epsilon)?);
    }
    push("conv_score", worst);

    let passed = entries.iter().all(|e| e.passed);
    Ok(GradCheckReport {
        epsilon: config.epsilon,
        tolerance: config.tolerance,
        entries,
        passed,
    })
}

/// Writes the gradient-check report; a failed check is a runtime error.
pub fn grad_check_command(config: &GradCheckConfig, seed: u64, out: &Path) -> std::result::Result<(), CliError> {
    let report = grad_check_report(config, seed).map_err(runtime)?;
    write_json(out, &report).map_err(runtime)?;
    if !report.passed {
        return Err(CliError::Runtime(Error::CheckFailed(format!(
            "gradient check above tolerance: {}",
            to_rounded_json(&report.entries, false).unwrap_or_default()
        ))));
    }
    Ok(())
}
