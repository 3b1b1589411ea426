use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Mean focal loss over all elements and its gradient w.r.t. `pred`.
///
/// Predictions are clamped to `[1e-7, 1 − 1e-7]`; clamped entries get a zero
/// gradient.
pub fn focal_loss(pred: &[f64], labels: &[f64], config: &FocalConfig) -> Result<(f64, Vec<f64>)> {
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(invalid("focal loss over zero elements"));
    }
    if !(config.alpha >= 0.0 && config.alpha <= 1.0 && config.gamma >= 0.0) {
        return Err(invalid("focal loss needs alpha in [0, 1] and gamma >= 0"));
    }
    let (a, g) = (config.alpha, config.gamma);
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (i, (&raw, &y)) in pred.iter().zip(labels).enumerate() {
        if !raw.is_finite() {
            return Err(Error::NonFinite(format!("prediction {i}")));
        }
        let p = raw.clamp(CLAMP, 1.0 - CLAMP);
        let live = p == raw;
        // `g · x^(g−1)`, taken as 0 when g = 0.
        let dpow = |x: f64| if g == 0.0 { 0.0 } else { g * x.powf(g - 1.0) };
        let (loss, d) = if y == 1.0 {
            let q = 1.0 - p;
            (-a * q.powf(g) * p.ln(), a * (dpow(q) * p.ln() - q.powf(g) / p))
        } else if y == 0.0 {
            let q = 1.0 - p;
            (
                -(1.0 - a) * p.powf(g) * q.ln(),
                -(1.0 - a) * (dpow(p) * q.ln() - p.powf(g) / q),
            )
        } else {
            return Err(invalid(format!("label {y} at index {i} is not 0 or 1")));
        };
        total += loss;
        grad.push(if live { d / n } else { 0.0 });
    }
    Ok((total / n, grad))
}

/// `L_f = L_f²ᵈ + L_f³ᵈ`; gradients are returned per part.
pub fn focal_loss_total(
    pred_2d: &[f64],
    labels_2d: &[f64],
    pred_3d: &[f64],
    labels_3d: &[f64],
    config: &FocalConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (l2, g2) = focal_loss(pred_2d, labels_2d, config)?;
    let (l3, g3) = focal_loss(pred_3d, labels_3d, config)?;
    Ok((l2 + l3, g2, g3))
}
