//! Iterative matching-free registration: sample candidates around the current
//! pose, build the cost volume, score, keep the best candidate, shrink.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::costvolume::{build_volume, VolumeInputs};
use crate::error::{invalid, Error, Result};
use crate::features::{
    zero_out_inferior, ConfidenceMap2D, ConfidenceSet3D, FeatureBundle, FeatureMap2D, FeatureSet3D, ZOIF_THRESHOLD,
};
use crate::geometry::{pose_errors, CameraIntrinsics, PointCloud, Pose};
use crate::sampling::{sample_candidates, SamplingSpace, Schedule};
use crate::scoring::{score_batch, BaselineScorer, ScoreVector, Scorer, ScorerParams};

/// Default number of units held in memory at once.
pub const DEFAULT_SEGMENT_SIZE: usize = 81;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerChoice {
    #[default]
    Baseline,
    /// Convolutional scorer loaded from a parameter file.
    Conv { params: PathBuf },
}

/// Which confidence planes act as weights. A disabled plane is replaced by
/// ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightingFlags {
    pub w2d: bool,
    pub w3d: bool,
}

impl Default for WeightingFlags {
    fn default() -> Self {
        Self { w2d: true, w3d: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub schedule: Schedule,
    pub scorer: ScorerChoice,
    pub zoif_enabled: bool,
    pub weighting: WeightingFlags,
    pub segment_size: usize,
    /// Starting pose; when absent the caller supplies one (identity for a
    /// bare `register`, the perturbed pose in benchmarks).
    pub initial_pose: Option<Pose>,
    /// Size of a dedicated thread pool; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            scorer: ScorerChoice::Baseline,
            zoif_enabled: true,
            weighting: WeightingFlags::default(),
            segment_size: DEFAULT_SEGMENT_SIZE,
            initial_pose: None,
            workers: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.segment_size < 1 {
            return Err(invalid("segment_size must be >= 1"));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers must be >= 1"));
        }
        Ok(())
    }

    /// Loads the configured scorer.
    pub fn load_scorer(&self) -> Result<Box<dyn Scorer>> {
        Ok(match &self.scorer {
            ScorerChoice::Baseline => Box::new(BaselineScorer),
            ScorerChoice::Conv { params } => Box::new(ScorerParams::load(params)?),
        })
    }
}

/// Per-scene tensors after ZOIF and weighting, ready for the iterative loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub cloud: PointCloud,
    pub intrinsics: CameraIntrinsics,
    pub features_2d: FeatureMap2D,
    pub features_3d: FeatureSet3D,
    pub weights_2d: ConfidenceMap2D,
    pub weights_3d: ConfidenceSet3D,
    /// Ground truth, when known; only used for the trace.
    pub truth: Option<Pose>,
}

impl PreparedScene {
    /// Applies ZOIF and the weighting switches once for the whole run.
    pub fn new(
        cloud: PointCloud,
        intrinsics: CameraIntrinsics,
        bundle: FeatureBundle,
        zoif_enabled: bool,
        weighting: WeightingFlags,
        truth: Option<Pose>,
    ) -> Result<Self> {
        intrinsics.validate()?;
        bundle.validate(cloud.len(), &intrinsics)?;
        let FeatureBundle {
            features_2d,
            features_3d,
            confidence_2d,
            confidence_3d,
        } = bundle;
        let features_3d = if zoif_enabled {
            zero_out_inferior(&features_3d, &confidence_3d, ZOIF_THRESHOLD)?
        } else {
            features_3d
        };
        let weights_2d = if weighting.w2d {
            confidence_2d
        } else {
            ConfidenceMap2D::uniform(intrinsics.height, intrinsics.width, 1.0)
        };
        let weights_3d = if weighting.w3d {
            confidence_3d
        } else {
            ConfidenceSet3D::uniform(cloud.len(), 1.0)
        };
        Ok(Self {
            cloud,
            intrinsics,
            features_2d,
            features_3d,
            weights_2d,
            weights_3d,
            truth,
        })
    }

    pub fn inputs(&self) -> VolumeInputs<'_> {
        VolumeInputs {
            cloud: &self.cloud,
            intrinsics: &self.intrinsics,
            features_2d: &self.features_2d,
            features_3d: &self.features_3d,
            weights_2d: &self.weights_2d,
            weights_3d: &self.weights_3d,
        }
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub best_index: usize,
    pub best_score: f64,
    /// Full yaw/pitch/roll extent of the grid, degrees (sum over axes).
    pub rotation_range_deg: f64,
    /// Full translation extent of the grid, metres (sum over axes).
    pub translation_range_m: f64,
    pub pose: Pose,
    pub rre_deg: Option<f64>,
    pub rte_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub final_pose: Pose,
    pub iterations_run: usize,
    pub trace: Vec<IterationRecord>,
}

/// One iteration: score every candidate of `space` around `current` and
/// return the best one. `iteration` only labels a `NoOverlap` error.
pub fn step(
    current: &Pose,
    space: &SamplingSpace,
    scene: &PreparedScene,
    scorer: &dyn Scorer,
    segment_size: usize,
    iteration: usize,
) -> Result<(Pose, ScoreVector)> {
    let candidates = sample_candidates(current, space)?;
    let stream = build_volume(&candidates, scene.inputs(), segment_size)?;
    let scores = score_batch(stream, scorer)?;
    if scores.all_empty() {
        return Err(Error::NoOverlap { iteration });
    }
    Ok((candidates[scores.best_index()], scores))
}

/// Runs the full schedule from `initial` with an already-loaded scorer.
pub fn register_with(
    scene: &PreparedScene,
    initial: &Pose,
    config: &EngineConfig,
    scorer: &dyn Scorer,
) -> Result<RegistrationResult> {
    config.validate()?;
    let run = || {
        let mut pose = *initial;
        let mut trace = Vec::with_capacity(config.schedule.iterations);
        let mut space = config.schedule.initial_space;
        for iteration in 0..config.schedule.iterations {
            if iteration > 0 {
                space = crate::sampling::shrink(&space, &config.schedule);
            }
            let (next, scores) = step(&pose, &space, scene, scorer, config.segment_size, iteration)?;
            pose = next;
            let err = scene.truth.map(|t| pose_errors(&pose, &t));
            trace.push(IterationRecord {
                iteration,
                best_index: scores.best_index(),
                best_score: scores.best_score(),
                rotation_range_deg: space.rotation_full_range(),
                translation_range_m: space.translation_full_range(),
                pose,
                rre_deg: err.map(|e| e.rre),
                rte_m: err.map(|e| e.rte),
            });
        }
        Ok(RegistrationResult {
            final_pose: pose,
            iterations_run: trace.len(),
            trace,
        })
    };
    match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Loads the configured scorer and registers from `initial`.
pub fn register(scene: &PreparedScene, initial: &Pose, config: &EngineConfig) -> Result<RegistrationResult> {
    let scorer = config.load_scorer()?;
    register_with(scene, initial, config, scorer.as_ref())
}
