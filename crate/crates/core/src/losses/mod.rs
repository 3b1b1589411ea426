//! Training losses with analytic gradients, and a finite-difference checker.

mod circle;
mod focal;

pub use circle::{build_pos_neg_sets, circle_loss, CircleLossConfig, CircleLossOutput, CorrespondenceSets};
pub use focal::{focal_loss, focal_loss_total, FocalConfig};

use crate::error::{invalid, Error, Result};

/// `−log softmax(scores)[target]` and its gradient `softmax − one_hot`.
///
/// Scores of `−∞` are allowed (zero probability, zero gradient) as long as
/// the target itself is finite.
pub fn cross_entropy_scores(scores: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= scores.len() {
        return Err(invalid(format!(
            "target {target} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) || !scores[target].is_finite() {
        return Err(Error::NonFinite("cross-entropy scores".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_z = max + sum.ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    Ok((log_z - scores[target], grad))
}

/// Largest relative disagreement between the analytic gradient of `f` at
/// `x` and central differences with step `epsilon`:
/// `max_k |a_k − n_k| / max(|a_k|, |n_k|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid("epsilon must be positive"));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("function value".into()));
    }
    if analytic.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let mut point = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        point[k] = x[k] + epsilon;
        let plus = f(&point)?.0;
        point[k] = x[k] - epsilon;
        let minus = f(&point)?.0;
        point[k] = x[k];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("function value near coordinate {k}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_log_n() {
        let (v, g) = cross_entropy_scores(&vec![0.3; 729], 17).unwrap();
        assert!((v - 729f64.ln()).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn saturated_target_gives_zero() {
        let (v, _) = cross_entropy_scores(&[0.0, 800.0, 1.0], 1).unwrap();
        assert_eq!(v, 0.0);
        let (v, g) = cross_entropy_scores(&[f64::NEG_INFINITY, 2.0], 1).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_errors() {
        assert!(cross_entropy_scores(&[0.0, 1.0], 2).is_err());
        assert!(cross_entropy_scores(&[f64::NEG_INFINITY, 1.0], 0).is_err());
        assert!(cross_entropy_scores(&[f64::NAN, 1.0], 1).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = rng.random_range(0..9);
            let err = grad_check(|s| cross_entropy_scores(s, t), &x, 1e-6).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn grad_check_trivial_functions() {
        let sq = |x: &[f64]| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()));
        assert!(grad_check(sq, &[1.0, 2.0], 1e-5).unwrap() < 1e-8);
        let c = |x: &[f64]| Ok((4.0, vec![0.0; x.len()]));
        assert_eq!(grad_check(c, &[1.0, 2.0], 1e-5).unwrap(), 0.0);
        assert!(grad_check(c, &[1.0], 0.0).is_err());
        let wrong = |_: &[f64]| Ok((1.0, vec![0.0]));
        assert!(grad_check(wrong, &[1.0, 2.0], 1e-5).is_err());
    }
}
