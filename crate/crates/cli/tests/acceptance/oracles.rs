//! Library functions against hand-written scalar loops.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semadjust_core::adjustmap::{class_weights, expected_regression_loss, update_frequency_ema, ClassWeightState, PresetPosterior};
use semadjust_core::bilinear::{bilinear_forward, BilinearHeadParams};
use semadjust_core::losses::{huber, LossKind};

use crate::common::{ensure, relative_error, simplex};
use crate::Outcome;

const EXACT: f64 = 1e-10;
const COMPOSITE: f64 = 1e-6;
const INSTANCES: usize = 200;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn oracle_huber(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e * e / 2.0
    } else {
        delta * e.abs() - delta * delta / 2.0
    }
}

fn oracle_mse(e: f64) -> f64 {
    e * e / 2.0
}

fn check_huber(rng: &mut impl Rng) -> Outcome {
    let worked = huber(0.1, 0.04);
    ensure!(close(worked, 0.0032, EXACT), "huber(0.1, 0.04) = {worked}, expected 0.0032");
    for _ in 0..INSTANCES * 5 {
        let delta = rng.random_range(1e-3..0.5);
        let e = rng.random_range(-1.0..1.0);
        ensure!(close(huber(e, delta), oracle_huber(e, delta), EXACT), "huber({e}, {delta}) disagrees");
    }
    Ok(format!("huber(0.1, 0.04) = {worked}"))
}

fn check_bilinear(rng: &mut impl Rng) -> Outcome {
    for _ in 0..INSTANCES {
        let (color_dim, context_dim, rank) = (rng.random_range(1..7), rng.random_range(1..6), rng.random_range(1..6));
        let params = BilinearHeadParams {
            color_factor: matrix(rng, color_dim, rank, 1.0),
            context_factor: matrix(rng, context_dim, rank, 1.0),
            output_factor: matrix(rng, rank, 3, 1.0),
            color_bias: matrix(rng, 1, rank, 0.5).row(0).to_owned(),
            context_bias: matrix(rng, 1, rank, 0.5).row(0).to_owned(),
            output_bias: matrix(rng, 1, 3, 0.5).row(0).to_owned(),
        };
        let color: Vec<f64> = (0..color_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let context: Vec<f64> = (0..context_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = [rng.random_range(0.0..100.0), rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0)];

        let mut product = vec![0.0; rank];
        for (j, slot) in product.iter_mut().enumerate() {
            let mut color_pre = params.color_bias[j];
            for (i, f) in color.iter().enumerate() {
                color_pre += f * params.color_factor[[i, j]];
            }
            let mut context_pre = params.context_bias[j];
            for (i, g) in context.iter().enumerate() {
                context_pre += g * params.context_factor[[i, j]];
            }
            *slot = color_pre.tanh() * context_pre.tanh();
        }
        let unscale = [100.0, 110.0, 110.0];
        let (residual, output) = bilinear_forward(&color, &context, &params, x).map_err(|e| e.to_string())?;
        for ch in 0..3 {
            let mut pre = params.output_bias[ch];
            for (j, h) in product.iter().enumerate() {
                pre += h * params.output_factor[[j, ch]];
            }
            let expected = pre.tanh();
            ensure!(close(residual[ch], expected, EXACT), "residual[{ch}] {} vs loop {expected}", residual[ch]);
            let expected_out = x[ch] + expected * unscale[ch];
            ensure!(close(output[ch], expected_out, EXACT), "output[{ch}] {} vs loop {expected_out}", output[ch]);
        }
    }
    Ok(format!("bilinear_forward on {INSTANCES} instances"))
}

fn state_with(frequencies: Vec<f64>, alpha: f64) -> ClassWeightState {
    let mut state = ClassWeightState::new(frequencies.len(), alpha).unwrap();
    state.frequencies = frequencies;
    state
}

fn check_weights_and_ema(rng: &mut impl Rng) -> Outcome {
    let posterior = PresetPosterior::from_probabilities(Array2::from_shape_vec((2, 2), vec![0.95, 0.05, 0.85, 0.15]).unwrap())
        .map_err(|e| e.to_string())?;
    let next = update_frequency_ema(&state_with(vec![0.5, 0.5], 0.8), &[&posterior]).map_err(|e| e.to_string())?;
    ensure!(
        close(next.frequencies[0], 0.54, EXACT) && close(next.frequencies[1], 0.46, EXACT),
        "frequencies {:?}, expected (0.54, 0.46)",
        next.frequencies
    );
    let w = class_weights(&state_with(vec![0.54, 0.46], 0.8));
    ensure!(close(w[0], 0.632, EXACT) && close(w[1], 0.568, EXACT), "weights {w:?}, expected (0.632, 0.568)");

    for _ in 0..INSTANCES {
        let k = rng.random_range(2..7);
        let alpha = rng.random_range(0.0..=1.0);
        let state = state_with(simplex(rng, k), alpha);
        let batch: Vec<PresetPosterior> = (0..rng.random_range(1..4))
            .map(|_| {
                let n = rng.random_range(1..9);
                PresetPosterior::from_logits(&matrix(rng, n, k, 4.0))
            })
            .collect();
        let refs: Vec<&PresetPosterior> = batch.iter().collect();
        let next = update_frequency_ema(&state, &refs).map_err(|e| e.to_string())?;
        let mut sums = vec![0.0; k];
        let mut pixels = 0.0;
        for p in &batch {
            for row in p.probabilities().rows() {
                for kk in 0..k {
                    sums[kk] += row[kk];
                }
                pixels += 1.0;
            }
        }
        for kk in 0..k {
            let expected = 0.9 * state.frequencies[kk] + 0.1 * sums[kk] / pixels;
            ensure!(close(next.frequencies[kk], expected, EXACT), "ema entry {kk}: {} vs {expected}", next.frequencies[kk]);
        }
        let w = class_weights(&state);
        for kk in 0..k {
            let expected = alpha * state.frequencies[kk] + 1.0 - alpha;
            ensure!(close(w[kk], expected, EXACT), "weight {kk}: {} vs {expected}", w[kk]);
        }
    }
    Ok("a = (0.54, 0.46), w = (0.632, 0.568)".into())
}

/// `(1/n) Σ_i Σ_k w_k p_ik Σ_c loss(target_ic − pred_kic)` by plain loops.
fn oracle_expected(
    logits: &Array2<f64>,
    preds: &[Array2<f64>],
    targets: &Array2<f64>,
    weights: &[f64],
    kind: LossKind,
    delta: f64,
) -> f64 {
    let (n, k) = logits.dim();
    let mut total = 0.0;
    for i in 0..n {
        let max = (0..k).map(|j| logits[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = (0..k).map(|j| (logits[[i, j]] - max).exp()).sum();
        for j in 0..k {
            let p = (logits[[i, j]] - max).exp() / norm;
            let mut loss = 0.0;
            for c in 0..3 {
                let e = targets[[i, c]] - preds[j][[i, c]];
                loss += match kind {
                    LossKind::Huber => oracle_huber(e, delta),
                    LossKind::Mse => oracle_mse(e),
                };
            }
            total += weights[j] * p * loss;
        }
    }
    total / n as f64
}

fn check_expected_loss(rng: &mut impl Rng) -> Outcome {
    let h = 1e-6;
    let mut worst_grad = 0.0f64;
    for instance in 0..INSTANCES {
        let kind = if instance % 2 == 0 { LossKind::Huber } else { LossKind::Mse };
        let (n, k) = (rng.random_range(1..6), rng.random_range(2..5));
        let delta = rng.random_range(0.02..0.2);
        let logits = matrix(rng, n, k, 3.0);
        let preds: Vec<Array2<f64>> = (0..k).map(|_| matrix(rng, n, 3, 0.3)).collect();
        let targets = matrix(rng, n, 3, 0.3);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let eval = |logits: &Array2<f64>, preds: &[Array2<f64>]| {
            expected_regression_loss(&PresetPosterior::from_logits(logits), preds, &targets, &weights, kind, delta).unwrap()
        };
        let out = eval(&logits, &preds);
        let oracle = oracle_expected(&logits, &preds, &targets, &weights, kind, delta);
        ensure!(close(out.value, oracle, EXACT), "expected loss {} vs loop {oracle}", out.value);

        // Gradients are composites: compare against central differences of the loop.
        for i in 0..n {
            for j in 0..k {
                let mut lp = logits.clone();
                lp[[i, j]] += h;
                let mut lm = logits.clone();
                lm[[i, j]] -= h;
                let numeric = (oracle_expected(&lp, &preds, &targets, &weights, kind, delta)
                    - oracle_expected(&lm, &preds, &targets, &weights, kind, delta))
                    / (2.0 * h);
                let err = (out.grad_logits[[i, j]] - numeric).abs();
                worst_grad = worst_grad.max(err);
                ensure!(err <= COMPOSITE, "grad_logits[{i},{j}] {} vs {numeric}", out.grad_logits[[i, j]]);
                for c in 0..3 {
                    let mut pp = preds.to_vec();
                    pp[j][[i, c]] += h;
                    let mut pm = preds.to_vec();
                    pm[j][[i, c]] -= h;
                    let numeric = (oracle_expected(&logits, &pp, &targets, &weights, kind, delta)
                        - oracle_expected(&logits, &pm, &targets, &weights, kind, delta))
                        / (2.0 * h);
                    let got = out.grad_predictions[j][[i, c]];
                    let err = (got - numeric).abs();
                    worst_grad = worst_grad.max(err);
                    ensure!(
                        err <= COMPOSITE || relative_error(got, numeric, 1e-12) <= COMPOSITE,
                        "grad_predictions[{j}][{i},{c}] {got} vs {numeric}"
                    );
                }
            }
        }
    }
    Ok(format!("expected_regression_loss gradient error {worst_grad:.1e}"))
}

pub fn criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let parts = [
        check_huber(&mut rng)?,
        check_bilinear(&mut rng)?,
        check_weights_and_ema(&mut rng)?,
        check_expected_loss(&mut rng)?,
    ];
    Ok(parts.join("; "))
}
