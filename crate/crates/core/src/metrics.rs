//! Recovery errors and the calibrated averaged performance score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// One point of a privacy/utility sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub param_value: f64,
    pub main_task_accuracy: f64,
    pub recovery_error: f64,
}

impl TradeoffPoint {
    pub fn new(param_value: f64, main_task_accuracy: f64, recovery_error: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&main_task_accuracy) {
            return Err(Error::Argument(format!(
                "accuracy must be in [0, 1], got {main_task_accuracy}"
            )));
        }
        if !(recovery_error >= 0.0) {
            return Err(Error::Argument(format!(
                "recovery error must be >= 0, got {recovery_error}"
            )));
        }
        Ok(Self {
            param_value,
            main_task_accuracy,
            recovery_error,
        })
    }
}

pub fn mse_recovery(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    Ok(x.sub(x_hat)?.sq_norm() / x.len() as f64)
}

/// Fraction of mismatched labels.
pub fn label_recovery_error(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Argument(format!(
            "need equal non-empty label lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / pred.len() as f64)
}

/// Mean of `accuracy * recovery_error` over the sweep.
pub fn cap(points: &[TradeoffPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Argument("cap needs at least one point".into()));
    }
    Ok(points
        .iter()
        .map(|p| p.main_task_accuracy * p.recovery_error)
        .sum::<f64>()
        / points.len() as f64)
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Argument("logit rows and labels differ".into()));
    }
    let pred = argmax_rows(logits);
    Ok(1.0 - label_recovery_error(&pred, labels)?)
}

/// Index of the largest entry of each row (first one on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
