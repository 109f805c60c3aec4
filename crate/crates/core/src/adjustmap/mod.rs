//! Semantic adjustment map: a `K`-way categorical preset head, the exact
//! expectation of the per-preset regression loss under its posterior,
//! moving-average class reweighting, and map extraction / substitution.

mod codec;

pub use codec::{decode_indexed_png, encode_indexed_png, preset_color, RleMap};
pub(crate) use codec::decode_label_png;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearHeadParams, ContextInput};
use crate::colorspace::LabImage;
use crate::losses::{pixel_loss, LossKind};
use crate::model::Model;
use crate::nn::{softmax_rows, Linear};
use crate::{Error, Result};

/// Largest preset count for which the exact expectation over presets is used.
pub const MAX_PRESETS: usize = 16;

/// Per-pixel categorical distribution over `K` presets, one row per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetPosterior {
    probabilities: Array2<f64>,
}

impl PresetPosterior {
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        Self {
            probabilities: softmax_rows(logits),
        }
    }

    /// Wraps explicit probabilities; rows must be nonnegative and sum to 1 ± 1e-6.
    pub fn from_probabilities(probabilities: Array2<f64>) -> Result<Self> {
        for (i, row) in probabilities.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("row {i} is not a probability vector (sum {sum})")));
            }
        }
        Ok(Self { probabilities })
    }

    pub fn k(&self) -> usize {
        self.probabilities.ncols()
    }

    pub fn len(&self) -> usize {
        self.probabilities.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn probabilities(&self) -> &Array2<f64> {
        &self.probabilities
    }

    /// Average over pixels: the batch soft frequency of each preset.
    pub fn mean(&self) -> Array1<f64> {
        self.probabilities.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(self.k()))
    }
}

/// Linear map from context vectors to `K` logits, followed by softmax.
pub fn preset_posterior(context: &Array2<f64>, head: &Linear) -> PresetPosterior {
    PresetPosterior::from_logits(&head.forward(context))
}

/// Candidate outputs (normalized color units), one `(n, 3)` block per
/// preset: the bilinear head evaluated with a one-hot context.
pub fn per_preset_predictions(
    color: &Array2<f64>,
    params: &BilinearHeadParams,
    inputs: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    if inputs.dim() != (color.nrows(), 3) {
        return Err(Error::Shape("inputs must be n x 3".into()));
    }
    let k = params.context_dim();
    if k > MAX_PRESETS {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds the supported maximum {MAX_PRESETS}")));
    }
    if k > 0 {
        params.check_inputs(color, ContextInput::OneHot(k - 1))?;
    }
    let hidden = params.color_hidden(color);
    Ok((0..k)
        .map(|preset| params.forward_with_hidden(hidden.clone(), ContextInput::OneHot(preset)).residual + inputs)
        .collect())
}

/// Value and gradients of the posterior-weighted, class-weighted regression loss.
#[derive(Debug, Clone)]
pub struct ExpectedLoss {
    /// Mean over pixels of `Σ_k weight_k · posterior_k · loss_k`.
    pub value: f64,
    /// Per-pixel, per-preset unweighted losses.
    pub per_preset: Array2<f64>,
    pub grad_logits: Array2<f64>,
    /// Gradient with respect to each preset's predictions.
    pub grad_predictions: Vec<Array2<f64>>,
}

/// Exact expectation over presets of `weight_k · loss(target − prediction_k)`,
/// averaged over pixels.
///
/// The log-likelihood of a target under preset `k` is the negative loss summed
/// over channels, so minimizing this value maximizes the expected
/// log-likelihood. `weights` are constants (no gradient flows into them).
pub fn expected_regression_loss(
    posterior: &PresetPosterior,
    predictions: &[Array2<f64>],
    targets: &Array2<f64>,
    weights: &[f64],
    kind: LossKind,
    delta: f64,
) -> Result<ExpectedLoss> {
    let k = posterior.k();
    let n = posterior.len();
    if predictions.len() != k || weights.len() != k {
        return Err(Error::Shape(format!(
            "{} predictions and {} weights for K = {k}",
            predictions.len(),
            weights.len()
        )));
    }
    if targets.dim() != (n, 3) || predictions.iter().any(|p| p.dim() != (n, 3)) {
        return Err(Error::Shape("targets and predictions must be n x 3".into()));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidArgument("class weights must be positive".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty pixel batch".into()));
    }
    let probs = posterior.probabilities();
    let scale = 1.0 / n as f64;
    let mut per_preset = Array2::zeros((n, k));
    let mut grad_predictions: Vec<Array2<f64>> = (0..k).map(|_| Array2::zeros((n, 3))).collect();
    let mut grad_logits = Array2::zeros((n, k));
    let mut value = 0.0;
    for i in 0..n {
        let target = [targets[[i, 0]], targets[[i, 1]], targets[[i, 2]]];
        let mut expected = 0.0;
        for kk in 0..k {
            let pred = [predictions[kk][[i, 0]], predictions[kk][[i, 1]], predictions[kk][[i, 2]]];
            let (loss, grad) = pixel_loss(kind, delta, &target, &pred);
            per_preset[[i, kk]] = loss;
            let coef = weights[kk] * probs[[i, kk]];
            expected += coef * loss;
            for ch in 0..3 {
                grad_predictions[kk][[i, ch]] = scale * coef * grad[ch];
            }
        }
        value += expected;
        // d/dz_j Σ_k p_k c_k = p_j (c_j − Σ_k p_k c_k) with c_k = weight_k · loss_k
        for j in 0..k {
            grad_logits[[i, j]] = scale * probs[[i, j]] * (weights[j] * per_preset[[i, j]] - expected);
        }
    }
    Ok(ExpectedLoss {
        value: value * scale,
        per_preset,
        grad_logits,
        grad_predictions,
    })
}

/// Moving average of soft preset frequencies and the derived loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightState {
    pub frequencies: Vec<f64>,
    pub alpha: f64,
    pub ema_keep: f64,
    pub ema_new: f64,
    pub steps: u64,
}

impl ClassWeightState {
    /// Starts from uniform frequencies `1/K`.
    pub fn new(k: usize, alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(Self {
            frequencies: vec![1.0 / k as f64; k],
            alpha,
            ema_keep: 0.9,
            ema_new: 0.1,
            steps: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.frequencies.len()
    }
}

/// `next = 0.9 · previous + 0.1 · mean posterior`, the mean taken over every
/// pixel of the batch. Frequencies keep summing to one.
pub fn update_frequency_ema(state: &ClassWeightState, batch: &[&PresetPosterior]) -> Result<ClassWeightState> {
    let k = state.k();
    let mut sum = vec![0.0; k];
    let mut count = 0usize;
    for posterior in batch {
        if posterior.k() != k {
            return Err(Error::Shape(format!("posterior has K = {}, state has K = {k}", posterior.k())));
        }
        for row in posterior.probabilities().rows() {
            for (s, p) in sum.iter_mut().zip(row) {
                *s += p;
            }
        }
        count += posterior.len();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("frequency update needs at least one pixel".into()));
    }
    let mut next = state.clone();
    for (a, s) in next.frequencies.iter_mut().zip(sum) {
        *a = state.ema_keep * *a + state.ema_new * (s / count as f64);
    }
    next.steps += 1;
    Ok(next)
}

/// `weight = alpha · frequency + (1 − alpha)`: frequent presets get weights near 1, rare ones
/// near `1 − alpha`.
pub fn class_weights(state: &ClassWeightState) -> Vec<f64> {
    state
        .frequencies
        .iter()
        .map(|&a| state.alpha * a + (1.0 - state.alpha))
        .collect()
}

/// Discrete per-pixel preset assignment, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjustmentMap {
    height: usize,
    width: usize,
    k: usize,
    assignments: Vec<u16>,
}

impl AdjustmentMap {
    pub fn new(height: usize, width: usize, k: usize, assignments: Vec<u16>) -> Result<Self> {
        if assignments.len() != height * width {
            return Err(Error::Shape(format!(
                "{} assignments for a {height}x{width} map",
                assignments.len()
            )));
        }
        if k == 0 || k > 256 {
            return Err(Error::InvalidArgument(format!("K = {k} outside 1..=256")));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a as usize >= k) {
            return Err(Error::PresetIndex { index: bad as usize, k });
        }
        Ok(Self {
            height,
            width,
            k,
            assignments,
        })
    }

    pub fn uniform(height: usize, width: usize, k: usize, preset: usize) -> Result<Self> {
        Self::new(height, width, k, vec![preset as u16; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignments(&self) -> &[u16] {
        &self.assignments
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.assignments[row * self.width + col] as usize
    }

    pub fn set(&mut self, row: usize, col: usize, preset: usize) -> Result<()> {
        if preset >= self.k {
            return Err(Error::PresetIndex { index: preset, k: self.k });
        }
        self.assignments[row * self.width + col] = preset as u16;
        Ok(())
    }

    /// `K`-channel binary view: `one_hot()[[r, c, k]] == 1` iff pixel `(r, c)` uses preset `k`.
    pub fn one_hot(&self) -> ndarray::Array3<u8> {
        let mut out = ndarray::Array3::zeros((self.height, self.width, self.k));
        for (i, &a) in self.assignments.iter().enumerate() {
            out[[i / self.width, i % self.width, a as usize]] = 1;
        }
        out
    }
}

/// Per-pixel argmax of a row-major posterior; ties go to the lower index.
pub fn extract_adjustment_map(posterior: &PresetPosterior, height: usize, width: usize) -> Result<AdjustmentMap> {
    if posterior.len() != height * width {
        return Err(Error::Shape(format!(
            "posterior has {} rows for a {height}x{width} map",
            posterior.len()
        )));
    }
    let assignments = posterior
        .probabilities()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    AdjustmentMap::new(height, width, posterior.k(), assignments)
}

/// Adjust `image` with the presets given by `map`, bypassing the model's own posterior.
pub fn adjust_with_map(image: &LabImage, map: &AdjustmentMap, model: &Model) -> Result<LabImage> {
    model.adjust_with_map(image, map)
}
