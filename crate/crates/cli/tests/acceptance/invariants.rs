//! Property checks driven by proptest's runner.

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use semadjust_core::adjustmap::{
    class_weights, expected_regression_loss, extract_adjustment_map, update_frequency_ema, ClassWeightState,
    PresetPosterior,
};
use semadjust_core::bilinear::{BilinearHeadParams, ContextInput};
use semadjust_core::losses::{huber_grad, pixel_loss, LossKind};

use crate::common::ensure;
use crate::Outcome;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

/// `(n, k, logits)` with `logits` laid out row-major.
fn logits_strategy(max_n: usize, max_k: usize, scale: f64) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_n, 2..=max_k).prop_flat_map(move |(n, k)| {
        prop::collection::vec(-scale..scale, n * k).prop_map(move |v| Array2::from_shape_vec((n, k), v).unwrap())
    })
}

fn simplex_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn matrix_strategy(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn head_strategy(color_dim: usize, context_dim: usize, rank: usize) -> impl Strategy<Value = BilinearHeadParams> {
    (
        matrix_strategy(color_dim, rank, 2.0),
        matrix_strategy(context_dim, rank, 2.0),
        matrix_strategy(rank, 3, 2.0),
        matrix_strategy(2, rank, 2.0),
        matrix_strategy(1, 3, 2.0),
    )
        .prop_map(|(u, v, p, biases, out_bias)| BilinearHeadParams {
            color_factor: u,
            context_factor: v,
            output_factor: p,
            color_bias: biases.row(0).to_owned(),
            context_bias: biases.row(1).to_owned(),
            output_bias: out_bias.row(0).to_owned(),
        })
}

fn run<S: Strategy>(
    label: &str,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<String, String> {
    runner(cases)
        .run(&strategy, test)
        .map(|()| format!("{label} ({cases})"))
        .map_err(|e| format!("{label}: {e}"))
}

fn posterior_normalization() -> Outcome {
    run("posterior normalization", 512, logits_strategy(12, 8, 60.0), |logits| {
        let p = PresetPosterior::from_logits(&logits);
        for row in p.probabilities().rows() {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12, "row sums to {}", row.sum());
        }
        Ok(())
    })
}

fn ema_sum_conservation() -> Outcome {
    let strategy = (2usize..8)
        .prop_flat_map(|k| (simplex_strategy(k), prop::collection::vec(matrix_strategy(4, k, 10.0), 1..4), 0.0f64..=1.0));
    run("EMA sum conservation", 512, strategy, |(freq, logits, alpha)| {
        let mut state = ClassWeightState::new(freq.len(), alpha).unwrap();
        state.frequencies = freq;
        let batch: Vec<PresetPosterior> = logits.iter().map(PresetPosterior::from_logits).collect();
        let refs: Vec<&PresetPosterior> = batch.iter().collect();
        let mut next = state;
        for _ in 0..5 {
            next = update_frequency_ema(&next, &refs).unwrap();
            let sum: f64 = next.frequencies.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "frequencies sum to {sum}");
            prop_assert!(next.frequencies.iter().all(|&a| a >= 0.0));
        }
        Ok(())
    })
}

fn weight_bounds() -> Outcome {
    let strategy = (2usize..10).prop_flat_map(|k| (simplex_strategy(k), 0.0f64..=1.0));
    run("class weights within [1 - alpha, 1]", 1000, strategy, |(freq, alpha)| {
        let mut state = ClassWeightState::new(freq.len(), alpha).unwrap();
        state.frequencies = freq;
        // One rounding step of slack on either end.
        for w in class_weights(&state) {
            prop_assert!(w >= 1.0 - alpha - 1e-15 && w <= 1.0 + 1e-15, "w = {w}, alpha = {alpha}");
        }
        Ok(())
    })
}

fn residual_bounds() -> Outcome {
    let strategy = (1usize..6, 1usize..6, 1usize..5, 1usize..6).prop_flat_map(|(cd, md, rank, n)| {
        (head_strategy(cd, md, rank), matrix_strategy(n, cd, 3.0), matrix_strategy(n, md, 3.0))
    });
    // With factors in [-2, 2] the output pre-activation is bounded by 2 rank + 2,
    // well short of where tanh rounds to 1.
    run("residual inside (-1, 1)", 512, strategy, |(head, color, context)| {
        let act = head.forward(&color, ContextInput::Dense(&context)).unwrap();
        prop_assert!(act.residual.iter().all(|r| r.abs() < 1.0));
        Ok(())
    })
}

fn huber_gradient_clamp() -> Outcome {
    let strategy = (-100.0f64..100.0, 1e-4f64..1.0, prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(-2.0f64..2.0));
    run("Huber gradient bounded by delta", 1000, strategy, |(e, delta, target, prediction)| {
        prop_assert!(huber_grad(e, delta).abs() <= delta);
        let (_, grad) = pixel_loss(LossKind::Huber, delta, &target, &prediction);
        prop_assert!(grad.iter().all(|g| g.abs() <= delta));
        Ok(())
    })
}

fn jensen_lower_bound() -> Outcome {
    // Worked case first: p = (0.5, 0.5), q = (0.9, 0.1).
    let (p, q) = ([0.5, 0.5], [0.9f64, 0.1]);
    let lhs = (p[0] * q[0] + p[1] * q[1]).ln();
    let rhs = p[0] * q[0].ln() + p[1] * q[1].ln();
    ensure!((lhs + 0.693).abs() < 1e-3 && (rhs + 1.204).abs() < 1e-3, "worked case gives {lhs}, {rhs}");

    let strategy = (2usize..8).prop_flat_map(|k| {
        (
            simplex_strategy(k),
            prop::collection::vec(matrix_strategy(1, 3, 1.0), k),
            matrix_strategy(1, 3, 1.0),
            0.01f64..0.5,
        )
    });
    run("Jensen lower bound", 1000, strategy, |(p, preds, target, delta)| {
        let k = p.len();
        let posterior = PresetPosterior::from_probabilities(Array2::from_shape_vec((1, k), p.clone()).unwrap()).unwrap();
        let out = expected_regression_loss(&posterior, &preds, &target, &vec![1.0; k], LossKind::Huber, delta).unwrap();
        let q: Vec<f64> = out.per_preset.row(0).iter().map(|l| (-l).exp()).collect();
        let log_mixture = p.iter().zip(&q).map(|(p, q)| p * q).sum::<f64>().ln();
        let expected_log = p.iter().zip(&q).map(|(p, q)| p * q.ln()).sum::<f64>();
        prop_assert!(log_mixture >= expected_log - 1e-12, "{log_mixture} < {expected_log}");
        // The training objective is the negated right-hand side.
        prop_assert!((out.value + expected_log).abs() <= 1e-12);
        Ok(())
    })
    .map(|s| format!("{s}, worked case {lhs:.3} >= {rhs:.3}"))
}

fn argmax_equivariance() -> Outcome {
    let strategy = (1usize..5, 1usize..5, 2usize..7).prop_flat_map(|(h, w, k)| {
        (
            Just((h, w)),
            matrix_strategy(h * w, k, 5.0),
            Just((0..k).collect::<Vec<usize>>()).prop_shuffle(),
        )
    });
    run("argmax permutation equivariance", 512, strategy, |((h, w), logits, perm)| {
        let k = perm.len();
        // Ties make argmax order-dependent.
        for row in logits.rows() {
            let mut sorted: Vec<f64> = row.to_vec();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|p| p[0] != p[1]));
        }
        let mut permuted = Array2::zeros(logits.dim());
        for kk in 0..k {
            permuted.column_mut(perm[kk]).assign(&logits.column(kk));
        }
        let original = extract_adjustment_map(&PresetPosterior::from_logits(&logits), h, w).unwrap();
        let moved = extract_adjustment_map(&PresetPosterior::from_logits(&permuted), h, w).unwrap();
        for (a, b) in original.assignments().iter().zip(moved.assignments()) {
            prop_assert_eq!(perm[*a as usize], *b as usize);
        }
        Ok(())
    })
}

fn one_hot_row_selection() -> Outcome {
    let strategy = (1usize..6, 2usize..7, 1usize..5, 1usize..6).prop_flat_map(|(cd, k, rank, n)| {
        (head_strategy(cd, k, rank), matrix_strategy(n, cd, 2.0))
    });
    run("one-hot context selects a V row", 512, strategy, |(head, color)| {
        let (n, k) = (color.nrows(), head.context_dim());
        for preset in 0..k {
            let one_hot = head.forward(&color, ContextInput::OneHot(preset)).unwrap();
            let expected: Vec<f64> = (0..head.rank())
                .map(|j| (head.context_factor[[preset, j]] + head.context_bias[j]).tanh())
                .collect();
            prop_assert_eq!(one_hot.context_hidden.row(0).to_vec(), expected);
            let dense_ctx = Array2::from_shape_fn((n, k), |(_, j)| if j == preset { 1.0 } else { 0.0 });
            let dense = head.forward(&color, ContextInput::Dense(&dense_ctx)).unwrap();
            prop_assert_eq!(&one_hot.residual, &dense.residual);
        }
        Ok(())
    })
}

pub fn criterion() -> Outcome {
    let parts = [
        posterior_normalization()?,
        ema_sum_conservation()?,
        weight_bounds()?,
        residual_bounds()?,
        huber_gradient_clamp()?,
        jensen_lower_bound()?,
        argmax_equivariance()?,
        one_hot_row_selection()?,
    ];
    Ok(parts.join("; "))
}
