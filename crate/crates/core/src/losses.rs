//! Regression losses (Huber, squared error), scene-parsing cross-entropy and
//! the combined multi-task objective.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Parse label value that is excluded from the cross-entropy.
pub const IGNORE_LABEL: u16 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Huber,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Huber changepoint, in normalized color units.
    pub delta: f64,
    /// Weight of the scene-parsing term.
    pub lambda: f64,
    pub parse_classes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Huber,
            delta: 0.04,
            lambda: 0.01,
            parse_classes: 150,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.parse_classes < 2 {
            return Err(Error::Config(format!("parse_classes must be at least 2, got {}", self.parse_classes)));
        }
        Ok(())
    }
}

/// Quadratic for `|e| <= delta`, linear `delta (|e| - delta / 2)` beyond.
pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`]: `e` inside the changepoint, `delta * sign(e)` outside.
pub fn huber_grad(e: f64, delta: f64) -> f64 {
    e.clamp(-delta, delta)
}

/// Halved squared error, so it coincides with [`huber`] inside the changepoint.
pub fn squared(e: f64) -> f64 {
    0.5 * e * e
}

/// Per-pixel regression loss summed over channels, with its gradient with
/// respect to the prediction (`e = target - prediction`).
pub fn pixel_loss(kind: LossKind, delta: f64, target: &[f64; 3], prediction: &[f64; 3]) -> (f64, [f64; 3]) {
    let mut value = 0.0;
    let mut grad = [0.0; 3];
    for ch in 0..3 {
        let e = target[ch] - prediction[ch];
        let (v, g) = match kind {
            LossKind::Huber => (huber(e, delta), huber_grad(e, delta)),
            LossKind::Mse => (squared(e), e),
        };
        value += v;
        grad[ch] = -g;
    }
    (value, grad)
}

/// Mean negative log-softmax of the true class over non-ignored pixels.
///
/// Returns the loss and its gradient with respect to `logits`.
pub fn parse_cross_entropy(logits: &Array2<f64>, labels: &[u16]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    let classes = logits.ncols();
    let counted = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if counted == 0 {
        return Err(Error::InvalidArgument("every pixel carries the ignore label".into()));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= classes {
            return Err(Error::InvalidArgument(format!("parse label {label} outside 0..{classes}")));
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[label];
        for c in 0..classes {
            grad[[i, c]] = (row[c] - log_z).exp() / counted as f64;
        }
        grad[[i, label]] -= 1.0 / counted as f64;
    }
    Ok((total / counted as f64, grad))
}

/// `L = L_reg + lambda * L_parse`.
pub fn total_loss(l_reg: f64, l_parse: f64, lambda: f64) -> f64 {
    l_reg + lambda * l_parse
}
