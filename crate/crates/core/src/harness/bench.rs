//! Benchmark suites over synthetic scenes and their RR / RTE / RRE report.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, perturb_problem, PerturbConfig, SceneGenConfig, ScenePair};
use crate::engine::{register_with, EngineConfig, PreparedScene};
use crate::error::{invalid, Error, Result};
use crate::features::{FeatureBundle, FeatureProvider, OracleFeatureConfig, OracleProvider};
use crate::geometry::{pose_errors, Pose};
use crate::scoring::Scorer;
use crate::util::{derive_seed, to_rounded_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub scenes: usize,
    pub seed: u64,
    pub scene: SceneGenConfig,
    pub perturb: PerturbConfig,
    pub features: OracleFeatureConfig,
    pub engine: EngineConfig,
    /// Rotation threshold, degrees.
    pub tau_r_deg: f64,
    /// Translation threshold, metres.
    pub tau_t_m: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            seed: 0,
            scene: SceneGenConfig::default(),
            perturb: PerturbConfig::default(),
            features: OracleFeatureConfig::default(),
            engine: EngineConfig::default(),
            tau_r_deg: 10.0,
            tau_t_m: 5.0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(invalid("a suite needs at least one scene"));
        }
        if !(self.tau_r_deg > 0.0 && self.tau_t_m > 0.0) {
            return Err(invalid("thresholds must be positive"));
        }
        self.scene.validate()?;
        self.features.validate()?;
        self.engine.validate()
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

/// One row of the per-scene output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub seed: u64,
    pub success: bool,
    /// `None` when the run ended in `NoOverlap`.
    pub rre_deg: Option<f64>,
    pub rte_m: Option<f64>,
    pub initial_rre_deg: f64,
    pub initial_rte_m: f64,
    pub no_overlap: bool,
    pub iterations_run: usize,
    /// `[rre, rte]` after each iteration.
    pub iteration_errors: Vec<[f64; 2]>,
    pub final_pose: Option<Pose>,
}

/// Mean and population standard deviation of both errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteStats {
    pub count: usize,
    pub rte_mean: Option<f64>,
    pub rte_std: Option<f64>,
    pub rre_mean: Option<f64>,
    pub rre_std: Option<f64>,
}

impl SuiteStats {
    fn from_errors(errors: &[(f64, f64)]) -> Self {
        let stat = |xs: Vec<f64>| {
            if xs.is_empty() {
                return (None, None);
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        };
        let (rre_mean, rre_std) = stat(errors.iter().map(|e| e.0).collect());
        let (rte_mean, rte_std) = stat(errors.iter().map(|e| e.1).collect());
        Self {
            count: errors.len(),
            rte_mean,
            rte_std,
            rre_mean,
            rre_std,
        }
    }
}

/// How the reported errors are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDefinitions {
    pub rre: String,
    pub rte: String,
    pub success: String,
    pub statistics: String,
    pub assumed: bool,
}

impl Default for MetricDefinitions {
    fn default() -> Self {
        Self {
            rre: "degrees(acos((trace(R_est^T R_gt) - 1) / 2)), evaluated as atan2 of the skew part".into(),
            rte: "||t_est - t_gt||_2 in metres, camera-frame translations".into(),
            success: "rre < tau_r and rte < tau_t (strict, independent)".into(),
            statistics: "top-level means/stds over successful scenes only; all_scenes covers every scene with a final pose; std is the population std".into(),
            assumed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scene_count: usize,
    pub success_count: usize,
    pub rr: f64,
    pub rte_mean: Option<f64>,
    pub rte_std: Option<f64>,
    pub rre_mean: Option<f64>,
    pub rre_std: Option<f64>,
    pub all_scenes: SuiteStats,
    pub no_overlap_count: usize,
    pub tau_r_deg: f64,
    pub tau_t_m: f64,
    pub metrics: MetricDefinitions,
    pub config: SuiteConfig,
    pub records: Vec<SceneRecord>,
}

impl BenchmarkReport {
    /// Aggregates records (sorted by scene id).
    pub fn from_records(config: &SuiteConfig, mut records: Vec<SceneRecord>) -> Self {
        records.sort_by_key(|r| r.scene_id);
        let success: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.success)
            .map(|r| (r.rre_deg.unwrap_or(f64::NAN), r.rte_m.unwrap_or(f64::NAN)))
            .collect();
        let all: Vec<(f64, f64)> = records.iter().filter_map(|r| Some((r.rre_deg?, r.rte_m?))).collect();
        let s = SuiteStats::from_errors(&success);
        Self {
            scene_count: records.len(),
            success_count: success.len(),
            rr: success.len() as f64 / records.len().max(1) as f64,
            rte_mean: s.rte_mean,
            rte_std: s.rte_std,
            rre_mean: s.rre_mean,
            rre_std: s.rre_std,
            all_scenes: SuiteStats::from_errors(&all),
            no_overlap_count: records.iter().filter(|r| r.no_overlap).count(),
            tau_r_deg: config.tau_r_deg,
            tau_t_m: config.tau_t_m,
            metrics: MetricDefinitions::default(),
            config: config.clone(),
            records,
        }
    }

    /// The report the same suite would give had it stopped after
    /// `iterations` iterations (a shorter schedule is a prefix of the trace).
    pub fn truncated(&self, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(invalid("need at least one iteration"));
        }
        let mut config = self.config.clone();
        config.engine.schedule.iterations = iterations;
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if !r.no_overlap {
                    if iterations > r.iteration_errors.len() {
                        return Err(invalid(format!(
                            "scene {} ran only {} iterations",
                            r.scene_id, r.iterations_run
                        )));
                    }
                    r.iteration_errors.truncate(iterations);
                    let [rre, rte] = r.iteration_errors[iterations - 1];
                    r.rre_deg = Some(rre);
                    r.rte_m = Some(rte);
                    r.success = rre < self.tau_r_deg && rte < self.tau_t_m;
                    r.iterations_run = iterations;
                    r.final_pose = None;
                }
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_records(&config, records))
    }

    /// Writes `report.json` and `scenes.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut summary = self.clone();
        summary.records.clear();
        let mut text = to_rounded_json(&summary, true)?;
        text.push('\n');
        std::fs::write(dir.join("report.json"), text)?;
        let mut rows = std::io::BufWriter::new(std::fs::File::create(dir.join("scenes.jsonl"))?);
        for r in &self.records {
            writeln!(rows, "{}", to_rounded_json(r, false)?)?;
        }
        rows.flush()?;
        Ok(())
    }
}

/// Oracle bundle for `scene` under `config`.
pub fn oracle_bundle(scene: &ScenePair, config: &OracleFeatureConfig) -> Result<FeatureBundle> {
    OracleProvider::new(*config).provide(scene)
}

/// Generates, perturbs and registers scene `index` of the suite.
pub fn run_scene(config: &SuiteConfig, index: usize, scorer: &dyn Scorer) -> Result<SceneRecord> {
    let seed = config.scene_seed(index);
    let mut scene = generate_scene(&config.scene, seed)?;
    scene.scene_id = index as u64;
    let initial = perturb_problem(&scene, &config.perturb, seed)?;
    let bundle = oracle_bundle(&scene, &config.features)?;
    let truth = scene.gt_pose;
    let prepared = PreparedScene::new(
        scene.cloud,
        scene.intrinsics,
        bundle,
        config.engine.zoif_enabled,
        config.engine.weighting,
        Some(truth),
    )?;
    let start_err = pose_errors(&initial, &truth);
    let mut record = SceneRecord {
        scene_id: index as u64,
        seed,
        success: false,
        rre_deg: None,
        rte_m: None,
        initial_rre_deg: start_err.rre,
        initial_rte_m: start_err.rte,
        no_overlap: false,
        iterations_run: 0,
        iteration_errors: Vec::new(),
        final_pose: None,
    };
    match register_with(&prepared, &initial, &config.engine, scorer) {
        Ok(result) => {
            let err = pose_errors(&result.final_pose, &truth);
            record.success = err.rre < config.tau_r_deg && err.rte < config.tau_t_m;
            record.rre_deg = Some(err.rre);
            record.rte_m = Some(err.rte);
            record.iterations_run = result.iterations_run;
            record.iteration_errors = result
                .trace
                .iter()
                .map(|t| [t.rre_deg.unwrap_or(f64::NAN), t.rte_m.unwrap_or(f64::NAN)])
                .collect();
            record.final_pose = Some(result.final_pose);
        }
        Err(Error::NoOverlap { .. }) => record.no_overlap = true,
        Err(e) => return Err(e),
    }
    Ok(record)
}

/// Runs every scene of the suite; `NoOverlap` counts as a failed scene.
pub fn run_benchmark(config: &SuiteConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let scorer = config.engine.load_scorer()?;
    let records = (0..config.scenes)
        .map(|i| run_scene(config, i, scorer.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport::from_records(config, records))
}

/// Same as [`run_benchmark`] with an already-built scorer.
pub fn run_benchmark_with(config: &SuiteConfig, scorer: &dyn Scorer) -> Result<BenchmarkReport> {
    config.validate()?;
    let records = (0..config.scenes)
        .map(|i| run_scene(config, i, scorer))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport::from_records(config, records))
}
