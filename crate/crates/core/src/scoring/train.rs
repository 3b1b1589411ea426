//! Supervised training of the convolutional scorer with cross-entropy over
//! candidate scores.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{unit_input, ScorerArch, ScorerParams};
use crate::costvolume::build_volume;
use crate::engine::PreparedScene;
use crate::error::{invalid, Error, Result};
use crate::geometry::{compose_pose, euler_to_rotation, Pose};
use crate::losses::cross_entropy_scores;
use crate::sampling::{nearest_candidate_index, sample_candidates, SamplingSpace, Schedule};
use crate::util::{derive_seed, round_sig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta2: f64,
    /// Steps per plateau window; the rate is multiplied by `plateau_factor`
    /// when a window's mean loss does not beat the best earlier window.
    pub plateau_window: usize,
    pub plateau_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            plateau_window: 20,
            plateau_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Iteration states per step.
    pub batch_size: usize,
    pub arch: ScorerArch,
    pub optimizer: OptimizerConfig,
    /// Grids the iteration states are drawn from.
    pub schedule: Schedule,
    /// Fixed states used to measure the loss before and after training.
    pub eval_states: usize,
    pub segment_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 2,
            arch: ScorerArch::default(),
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
            eval_states: 16,
            segment_size: 81,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let o = &self.optimizer;
        if self.batch_size == 0 || self.eval_states == 0 || self.segment_size == 0 {
            return Err(invalid("batch_size, eval_states and segment_size must be >= 1"));
        }
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.momentum) && (0.0..1.0).contains(&o.beta2)) {
            return Err(invalid(
                "optimizer needs learning_rate > 0 and momentum, beta2 in [0, 1)",
            ));
        }
        if o.plateau_window == 0 || !(o.plateau_factor > 0.0 && o.plateau_factor <= 1.0) {
            return Err(invalid("plateau_window >= 1 and plateau_factor in (0, 1] required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub params: ScorerParams,
    /// `(step, mean batch loss)` before each update.
    pub loss_curve: Vec<(usize, f64)>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub final_learning_rate: f64,
}

/// A sampled iteration state: network inputs per candidate (`None` for
/// candidates with no occupied pixel) and the index nearest the truth.
struct State {
    inputs: Vec<Option<Vec<f64>>>,
    target: usize,
    height: usize,
    width: usize,
}

const TRAIN_STREAM: u64 = 0x7EA1;
const EVAL_STREAM: u64 = 0xE7A1;
const INIT_STREAM: u64 = 0x1417;

/// Random pose inside `space` around the truth, so the truth is within the
/// candidate grid around it.
fn offset_pose(truth: &Pose, space: &SamplingSpace, rng: &mut impl Rng) -> Result<Pose> {
    let mut draw = |g: &crate::sampling::AxisGrid| {
        if g.enabled && g.half_range > 0.0 {
            rng.random_range(-g.half_range..=g.half_range)
        } else {
            0.0
        }
    };
    let r = [
        draw(&space.rotation[0]),
        draw(&space.rotation[1]),
        draw(&space.rotation[2]),
    ];
    let t = [
        draw(&space.translation[0]),
        draw(&space.translation[1]),
        draw(&space.translation[2]),
    ];
    compose_pose(truth, &euler_to_rotation(r[0], r[1], r[2]), &t.into())
}

fn draw_state(scenes: &[PreparedScene], config: &TrainConfig, rng: &mut impl Rng) -> Result<State> {
    let scene = &scenes[rng.random_range(0..scenes.len())];
    let truth = scene
        .truth
        .ok_or_else(|| invalid("training scenes need a ground-truth pose"))?;
    let space = config
        .schedule
        .space_at(rng.random_range(0..config.schedule.iterations));
    let current = offset_pose(&truth, &space, rng)?;
    let candidates = sample_candidates(&current, &space)?;
    let target = nearest_candidate_index(&candidates, &truth, &space)?;
    let mut inputs = Vec::with_capacity(candidates.len());
    for segment in build_volume(&candidates, scene.inputs(), config.segment_size)? {
        for unit in segment? {
            inputs.push((!unit.aggregated().is_empty()).then(|| unit_input(&unit)));
        }
    }
    if inputs[target].is_none() {
        return Err(Error::NoOverlap { iteration: 0 });
    }
    Ok(State {
        inputs,
        target,
        height: scene.intrinsics.height,
        width: scene.intrinsics.width,
    })
}

/// Draws a state, retrying a bounded number of times when the target
/// candidate sees nothing.
fn draw_usable_state(scenes: &[PreparedScene], config: &TrainConfig, rng: &mut impl Rng) -> Result<State> {
    let mut last = None;
    for _ in 0..16 {
        match draw_state(scenes, config, rng) {
            Err(Error::NoOverlap { .. }) => last = Some(Error::NoOverlap { iteration: 0 }),
            other => return other,
        }
    }
    Err(last.unwrap_or_else(|| invalid("no usable training state")))
}

/// Loss of one state and, when `want_grad`, the parameter gradient.
fn state_loss(params: &ScorerParams, state: &State, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let passes: Vec<Option<(f64, super::network::ForwardCache)>> = state
        .inputs
        .par_iter()
        .map(|x| match x {
            Some(x) => params.forward(x, state.height, state.width).map(Some),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = passes
        .iter()
        .map(|p| p.as_ref().map_or(f64::NEG_INFINITY, |(s, _)| *s))
        .collect();
    let (loss, dscores) = cross_entropy_scores(&scores, state.target)?;
    if !want_grad {
        return Ok((loss, None));
    }
    let per_unit: Vec<Vec<f64>> = passes
        .par_iter()
        .zip(dscores.par_iter())
        .filter_map(|(p, &d)| p.as_ref().map(|(_, cache)| params.backward(cache, d)))
        .collect();
    let mut grad = vec![0.0; params.num_params()];
    for g in per_unit {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((loss, Some(grad)))
}

fn mean_loss(params: &ScorerParams, states: &[State]) -> Result<f64> {
    let mut total = 0.0;
    for s in states {
        total += state_loss(params, s, false)?.0;
    }
    Ok(total / states.len() as f64)
}

/// Trains a fresh scorer on `scenes` (each must carry its ground truth).
pub fn train_scorer(scenes: &[PreparedScene], config: &TrainConfig) -> Result<TrainingReport> {
    config.validate()?;
    let first = scenes
        .first()
        .ok_or_else(|| invalid("need at least one training scene"))?;
    let in_channels = ScorerParams::channels_for_dim(first.features_2d.dim());
    let mut params = ScorerParams::random(in_channels, &config.arch, derive_seed(config.seed, INIT_STREAM))?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, EVAL_STREAM));
    let eval: Vec<State> = (0..config.eval_states)
        .map(|_| draw_usable_state(scenes, config, &mut eval_rng))
        .collect::<Result<_>>()?;
    let initial_eval_loss = mean_loss(&params, &eval)?;

    let o = config.optimizer;
    let mut lr = o.learning_rate;
    let mut theta = params.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TRAIN_STREAM));
    let mut curve = Vec::with_capacity(config.steps);
    let mut best_window = f64::INFINITY;
    let mut window_sum = 0.0;

    for step in 0..config.steps {
        let mut grad = vec![0.0; theta.len()];
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let state = draw_usable_state(scenes, config, &mut rng)?;
            let (l, g) = state_loss(&params, &state, true)?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(g.expect("gradient requested")) {
                *a += b;
            }
        }
        let scale = 1.0 / config.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        curve.push((step, loss));

        match o.kind {
            OptimizerKind::Sgd => {
                for ((t, mi), g) in theta.iter_mut().zip(&mut m).zip(&grad) {
                    *mi = o.momentum * *mi + g * scale;
                    *t -= lr * *mi;
                }
            }
            OptimizerKind::Adam => {
                let k = (step + 1) as i32;
                let (c1, c2) = (1.0 - o.momentum.powi(k), 1.0 - o.beta2.powi(k));
                for (((t, mi), vi), g) in theta.iter_mut().zip(&mut m).zip(&mut v).zip(&grad) {
                    let g = g * scale;
                    *mi = o.momentum * *mi + (1.0 - o.momentum) * g;
                    *vi = o.beta2 * *vi + (1.0 - o.beta2) * g * g;
                    *t -= lr * (*mi / c1) / ((*vi / c2).sqrt() + 1e-8);
                }
            }
        }
        params.set_from_slice(&theta)?;
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }

        window_sum += loss;
        if (step + 1) % o.plateau_window == 0 {
            let mean = window_sum / o.plateau_window as f64;
            if mean >= best_window {
                lr *= o.plateau_factor;
            } else {
                best_window = mean;
            }
            window_sum = 0.0;
        }
    }

    let final_eval_loss = mean_loss(&params, &eval)?;
    Ok(TrainingReport {
        params,
        loss_curve: curve,
        initial_eval_loss,
        final_eval_loss,
        final_learning_rate: lr,
    })
}

/// Writes `step,loss` rows.
pub fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for (step, loss) in curve {
        writeln!(out, "{step},{}", round_sig(*loss))?;
    }
    out.flush()?;
    Ok(())
}
