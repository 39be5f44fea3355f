use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the positive-class term.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 3.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::arg(format!("alpha must be positive, got {}", self.alpha)))
        }
    }
}

/// Mean over pixels of `α·y·(−ln σ(z)) + (1−y)·(−ln(1−σ(z)))`, evaluated
/// through softplus so it stays finite for large logits.
pub fn weighted_bce<T: Scalar, D: Dimension>(
    logits: &Array<T, D>,
    targets: &Array<T, D>,
    cfg: &LossConfig,
) -> Result<T> {
    check(logits, targets, cfg)?;
    let alpha = T::of(cfg.alpha);
    let mut total = T::zero();
    Zip::from(logits).and(targets).for_each(|&z, &y| {
        total += alpha * y * softplus(-z) + (T::one() - y) * softplus(z);
    });
    Ok(total / T::of(logits.len() as f64))
}

/// Loss and its gradient with respect to the logits.
pub fn weighted_bce_with_grad<T: Scalar, D: Dimension>(
    logits: &Array<T, D>,
    targets: &Array<T, D>,
    cfg: &LossConfig,
) -> Result<(T, Array<T, D>)> {
    let loss = weighted_bce(logits, targets, cfg)?;
    let alpha = T::of(cfg.alpha);
    let scale = T::one() / T::of(logits.len() as f64);
    let mut grad = logits.clone();
    Zip::from(&mut grad).and(targets).for_each(|g, &y| {
        let p = sigmoid(*g);
        *g = (alpha * y * (p - T::one()) + (T::one() - y) * p) * scale;
    });
    Ok((loss, grad))
}

fn check<T: Scalar, D: Dimension>(logits: &Array<T, D>, targets: &Array<T, D>, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if logits.shape() != targets.shape() {
        return Err(Error::arg(format!(
            "logit shape {:?} != target shape {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if logits.is_empty() {
        return Err(Error::arg("empty loss input"));
    }
    if targets.iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::arg("targets must be binary"));
    }
    Ok(())
}
