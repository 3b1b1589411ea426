//! Per-unit similarity scores: a weighted feature-distance baseline and a
//! trainable convolutional scorer.

mod network;
mod train;

pub use network::{conv_score, unit_input, ConvLayer, ForwardCache, ScorerArch, ScorerParams, LEAKY_SLOPE};
pub use train::{train_scorer, write_loss_csv, OptimizerConfig, OptimizerKind, TrainConfig, TrainingReport};

use rayon::prelude::*;

use crate::costvolume::{CostVolumeUnit, VolumeStream};
use crate::error::{invalid, Error, Result};

const SUPPORT_EPS: f64 = 1e-12;

/// Scores of all candidates of one iteration, in candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
    best_index: usize,
}

impl ScoreVector {
    /// Picks the argmax, ties going to the lowest index. `−∞` is allowed;
    /// NaN is not.
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(invalid("score vector needs at least one candidate"));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan() || *s == f64::INFINITY) {
            return Err(Error::NonFinite(format!("score of candidate {i}")));
        }
        let mut best_index = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best_index] {
                best_index = i;
            }
        }
        Ok(Self { scores, best_index })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn best_index(&self) -> usize {
        self.best_index
    }

    pub fn best_score(&self) -> f64 {
        self.scores[self.best_index]
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// True when no candidate has any support.
    pub fn all_empty(&self) -> bool {
        self.scores.iter().all(|&s| s == f64::NEG_INFINITY)
    }
}

/// Something that maps a unit to a real score (higher is better).
pub trait Scorer: Sync {
    fn score(&self, unit: &CostVolumeUnit<'_>) -> Result<f64>;
}

/// Negated weighted mean feature distance over occupied pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineScorer;

impl Scorer for BaselineScorer {
    fn score(&self, unit: &CostVolumeUnit<'_>) -> Result<f64> {
        Ok(baseline_score(unit))
    }
}

impl Scorer for ScorerParams {
    fn score(&self, unit: &CostVolumeUnit<'_>) -> Result<f64> {
        conv_score(unit, self)
    }
}

/// Distance charged to a projected point for the part of it that its 3D
/// weight marks as not visible. Unit-norm features are at most this far apart.
pub const MISS_DISTANCE: f64 = 2.0;

/// Weighted mean feature distance over projected points, negated.
///
/// Every occupied pixel `p` with `n` points contributes
/// `w²ᵈ·(w̃·‖F²ᵈ − F̃‖ + (n − w̃)·MISS_DISTANCE)` over a support of `w²ᵈ·n`.
/// When the unit knows the cloud's total 3D weight, the weight that falls
/// outside the image is charged `MISS_DISTANCE` as well (with unit support).
/// With unit 3D weights and no total this is the plain weighted mean distance.
/// `−∞` when no pixel is occupied or the 2D weight is zero on all of them.
pub fn baseline_score(unit: &CostVolumeUnit<'_>) -> f64 {
    let agg = unit.aggregated();
    let f2d = unit.image_features();
    let w2d = unit.image_weights().values();
    let w3d = agg.weights();
    let occ = agg.occupancy();
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, row) in agg.occupied_features() {
        let dist = f2d
            .pixel(p)
            .iter()
            .zip(row)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let n = occ[p] as f64;
        let seen = w3d[p].min(n);
        num += w2d[p] * (seen * dist + (n - seen) * MISS_DISTANCE);
        den += w2d[p] * n;
    }
    if den == 0.0 {
        return f64::NEG_INFINITY;
    }
    if let Some(total) = unit.expected_weight() {
        let inside: f64 = agg.occupied_pixels().iter().map(|&p| w3d[p as usize]).sum();
        let missing = (total - inside).max(0.0);
        num += missing * MISS_DISTANCE;
        den += missing;
    }
    -num / den.max(SUPPORT_EPS)
}

/// Scores every unit of the stream. Units with no occupied pixel get `−∞`
/// under any scorer. The result does not depend on segment size or on how
/// many threads run.
pub fn score_batch(stream: VolumeStream<'_>, scorer: &dyn Scorer) -> Result<ScoreVector> {
    let mut scores = Vec::with_capacity(stream.len_candidates());
    for segment in stream {
        let segment = segment?;
        let part: Vec<f64> = segment
            .par_iter()
            .map(|unit| {
                if unit.aggregated().is_empty() {
                    Ok(f64::NEG_INFINITY)
                } else {
                    scorer.score(unit)
                }
            })
            .collect::<Result<_>>()?;
        scores.extend(part);
    }
    ScoreVector::new(scores)
}
