use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureMap2D, FeatureSet3D};
use crate::geometry::project_continuous;
use crate::harness::ScenePair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleLossConfig {
    pub gamma: f64,
    pub margin_pos: f64,
    pub margin_neg: f64,
    /// Pixel radius separating positives from negatives.
    pub radius: f64,
    /// Treat the adaptive weights as constants in the gradient.
    pub detach_weights: bool,
}

impl Default for CircleLossConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            margin_pos: 0.1,
            margin_neg: 1.4,
            radius: 1.0,
            detach_weights: true,
        }
    }
}

impl CircleLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma must be positive"));
        }
        if !(self.margin_pos >= 0.0 && self.margin_pos < self.margin_neg && self.margin_neg.is_finite()) {
            return Err(invalid("margins must satisfy 0 <= margin_pos < margin_neg"));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(invalid("radius must be >= 0"));
        }
        Ok(())
    }
}

/// In-frustum points, their anchor pixels and positive sets.
///
/// Anchor `i` is the pixel hit by point `points[i]`. The relation is
/// symmetric, so the same lists serve both anchoring directions: positives of
/// pixel `i` are points `j`, positives of point `i` are pixels `j`. Negatives
/// are the complement within the sampled set.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSets {
    /// Cloud index of each sampled point.
    pub points: Vec<usize>,
    /// Flat pixel index of each anchor.
    pub pixels: Vec<usize>,
    /// Sorted local indices `j` with `‖u_i − u_j‖ ≤ r`.
    pub positives: Vec<Vec<usize>>,
}

impl CorrespondenceSets {
    /// Builds the sets from continuous projections `coords` of the sampled
    /// points. Pairs are found through a grid of `max(r, 1)`-pixel cells.
    pub fn from_projections(points: Vec<usize>, coords: &[(f64, f64)], width: usize, radius: f64) -> Result<Self> {
        if points.len() != coords.len() {
            return Err(Error::ShapeMismatch("points and projections differ in length".into()));
        }
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(invalid("radius must be >= 0"));
        }
        let cell = radius.max(1.0);
        let key = |(u, v): (f64, f64)| ((u / cell).floor() as i64, (v / cell).floor() as i64);
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &c) in coords.iter().enumerate() {
            grid.entry(key(c)).or_default().push(i);
        }
        let r2 = radius * radius;
        let positives = coords
            .iter()
            .map(|&(u, v)| {
                let (cx, cy) = key((u, v));
                let mut out = Vec::new();
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                            for &j in bucket {
                                let (uj, vj) = coords[j];
                                if (u - uj).powi(2) + (v - vj).powi(2) <= r2 {
                                    out.push(j);
                                }
                            }
                        }
                    }
                }
                out.sort_unstable();
                out
            })
            .collect();
        let pixels = coords
            .iter()
            .map(|&(u, v)| v.floor() as usize * width + u.floor() as usize)
            .collect();
        Ok(Self {
            points,
            pixels,
            positives,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Local indices not in the positive set of anchor `i`.
    pub fn negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let pos = &self.positives[i];
        (0..self.len()).filter(move |j| pos.binary_search(j).is_err())
    }
}

/// Sampled set and positives under the ground-truth pose of `scene`.
pub fn build_pos_neg_sets(scene: &ScenePair, config: &CircleLossConfig) -> Result<CorrespondenceSets> {
    config.validate()?;
    let mut points = Vec::new();
    let mut coords = Vec::new();
    for (j, p) in scene.cloud.points().iter().enumerate() {
        if let Some(c) = project_continuous(p, &scene.gt_pose, &scene.intrinsics) {
            points.push(j);
            coords.push(c);
        }
    }
    CorrespondenceSets::from_projections(points, &coords, scene.intrinsics.width, config.radius)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleLossOutput {
    /// `L_c = L_c²ᵈ + L_c³ᵈ`.
    pub value: f64,
    pub value_2d: f64,
    pub value_3d: f64,
    /// Gradient w.r.t. every entry of the 2D feature map.
    pub grad_2d: Vec<f64>,
    /// Gradient w.r.t. every entry of the 3D feature set.
    pub grad_3d: Vec<f64>,
    /// Anchors without a positive or without a negative (per direction).
    pub skipped_2d: usize,
    pub skipped_3d: usize,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-anchor loss over `pos` and `neg` distances; returns the loss and
/// `∂L/∂d` for each positive and each negative.
fn anchor_term(pos: &[f64], neg: &[f64], c: &CircleLossConfig) -> (f64, Vec<f64>, Vec<f64>) {
    let g = c.gamma;
    let theta_p: Vec<f64> = pos.iter().map(|d| (g * (d - c.margin_pos)).max(0.0)).collect();
    let theta_n: Vec<f64> = neg.iter().map(|d| (g * (c.margin_neg - d)).max(0.0)).collect();
    let a: Vec<f64> = pos.iter().zip(&theta_p).map(|(d, t)| t * (d - c.margin_pos)).collect();
    let b: Vec<f64> = neg.iter().zip(&theta_n).map(|(d, t)| t * (c.margin_neg - d)).collect();
    let (la, lb) = (log_sum_exp(&a), log_sum_exp(&b));
    let loss = softplus(la + lb);
    let s = sigmoid(la + lb);
    // With live weights, d/dd [θ(d)·(d − Δ)] = 2θ on the active side.
    let k = if c.detach_weights { 1.0 } else { 2.0 };
    let dpos = a
        .iter()
        .zip(&theta_p)
        .map(|(ai, t)| s * (ai - la).exp() * k * t)
        .collect();
    let dneg = b
        .iter()
        .zip(&theta_n)
        .map(|(bi, t)| -s * (bi - lb).exp() * k * t)
        .collect();
    (loss, dpos, dneg)
}

/// Bidirectional circle loss over `sets`, averaged over the sampled count in
/// each direction. Skipped anchors contribute zero.
pub fn circle_loss(
    f2d: &FeatureMap2D,
    f3d: &FeatureSet3D,
    sets: &CorrespondenceSets,
    config: &CircleLossConfig,
) -> Result<CircleLossOutput> {
    config.validate()?;
    if f2d.dim() != f3d.dim() {
        return Err(Error::ShapeMismatch("2D and 3D feature dims differ".into()));
    }
    if f2d.values().iter().chain(f3d.values()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("circle loss features".into()));
    }
    let n = sets.len();
    let mut out = CircleLossOutput {
        value: 0.0,
        value_2d: 0.0,
        value_3d: 0.0,
        grad_2d: vec![0.0; f2d.values().len()],
        grad_3d: vec![0.0; f3d.values().len()],
        skipped_2d: 0,
        skipped_3d: 0,
    };
    if n == 0 {
        return Ok(out);
    }
    let dim = f2d.dim();
    let px = |i: usize| f2d.pixel(sets.pixels[i]);
    let pt = |j: usize| f3d.row(sets.points[j]);
    // D[i][j] = ‖F²ᵈ(u_i) − F³ᵈ(p_j)‖.
    let dist: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| distance(px(i), pt(j)))
        .collect();
    let accumulate = |i: usize, j: usize, dl: f64, grad_2d: &mut [f64], grad_3d: &mut [f64]| {
        let d = dist[i * n + j];
        if d == 0.0 || dl == 0.0 {
            return;
        }
        let (a, b) = (px(i), pt(j));
        let g2 = &mut grad_2d[sets.pixels[i] * dim..(sets.pixels[i] + 1) * dim];
        let g3 = &mut grad_3d[sets.points[j] * dim..(sets.points[j] + 1) * dim];
        for c in 0..dim {
            let g = dl * (a[c] - b[c]) / d / n as f64;
            g2[c] += g;
            g3[c] -= g;
        }
    };
    for direction in 0..2 {
        for i in 0..n {
            let pos = &sets.positives[i];
            if pos.is_empty() || pos.len() == n {
                if direction == 0 {
                    out.skipped_2d += 1;
                } else {
                    out.skipped_3d += 1;
                }
                continue;
            }
            let neg: Vec<usize> = sets.negatives(i).collect();
            // Pixel-anchored reads row i, point-anchored reads column i.
            let at = |j: usize| {
                if direction == 0 {
                    dist[i * n + j]
                } else {
                    dist[j * n + i]
                }
            };
            let dp: Vec<f64> = pos.iter().map(|&j| at(j)).collect();
            let dn: Vec<f64> = neg.iter().map(|&j| at(j)).collect();
            let (loss, gp, gn) = anchor_term(&dp, &dn, config);
            if direction == 0 {
                out.value_2d += loss / n as f64;
            } else {
                out.value_3d += loss / n as f64;
            }
            for (&j, &dl) in pos.iter().zip(&gp).chain(neg.iter().zip(&gn)) {
                let (pi, pj) = if direction == 0 { (i, j) } else { (j, i) };
                accumulate(pi, pj, dl, &mut out.grad_2d, &mut out.grad_3d);
            }
        }
    }
    out.value = out.value_2d + out.value_3d;
    Ok(out)
}
