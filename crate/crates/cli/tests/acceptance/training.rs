//! End-to-end training on the synthetic benchmark.

use std::time::{Duration, Instant};

use semadjust_core::config::TrainConfig;
use semadjust_core::data::{generate_synthetic_benchmark, SyntheticSpec};
use semadjust_core::evaluator::evaluate;
use semadjust_core::model::Variant;
use semadjust_core::trainer::train;

use crate::common::ensure;
use crate::Outcome;

const TIME_BUDGET: Duration = Duration::from_secs(15 * 60);
const CORRUPTION: f64 = 0.05;

/// Toy profile with a step budget that converges on 64x64 synthetic images.
fn toy_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::toy().with_variant(variant);
    c.learning_rate = 3e-3;
    c.max_steps = Some(300);
    c.seed = seed;
    c
}

pub fn end_to_end() -> Outcome {
    let spec = SyntheticSpec::two_presets();
    ensure!(spec.k == 2 && spec.noise_sigma == 0.5 && spec.height == 64 && spec.width == 64, "unexpected benchmark spec");
    let train_set = generate_synthetic_benchmark(&spec, 40, 1).map_err(|e| e.to_string())?;
    let test_set = generate_synthetic_benchmark(&spec, 10, 2).map_err(|e| e.to_string())?;

    let mut config = toy_config(Variant::HUBER_S, 0);
    config.validate_every = 10;
    let start = Instant::now();
    let outcome = train(&config, &train_set, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(elapsed <= TIME_BUDGET, "training took {elapsed:?}");

    let model = outcome.best.to_model().map_err(|e| e.to_string())?;
    let report = evaluate(&model, &test_set).map_err(|e| e.to_string())?;
    let (lab, baseline) = (report.mean_lab_l2(), report.mean_baseline());
    let accuracy = report.map_accuracy.ok_or("model produced no adjustment maps")?;
    let detail = format!(
        "test Lab-L2 {lab:.3} vs baseline {baseline:.3} (ratio {:.3}), map accuracy {accuracy:.3}, trained in {:.0}s",
        lab / baseline,
        elapsed.as_secs_f64()
    );
    ensure!(lab <= baseline / 3.0, "Lab-L2 above a third of baseline: {detail}");
    ensure!(accuracy >= 0.90, "map accuracy below 0.90: {detail}");
    Ok(detail)
}

pub fn corruption_robustness() -> Outcome {
    let clean = SyntheticSpec::two_presets();
    let corrupted = SyntheticSpec {
        boundary_corruption: CORRUPTION,
        ..clean.clone()
    };
    let mut huber_scores = Vec::new();
    let mut mse_scores = Vec::new();
    for seed in 0..3u64 {
        let train_set = generate_synthetic_benchmark(&corrupted, 40, 10 + seed).map_err(|e| e.to_string())?;
        let test_set = generate_synthetic_benchmark(&clean, 10, 100 + seed).map_err(|e| e.to_string())?;
        for (variant, scores) in [(Variant::HUBER, &mut huber_scores), (Variant::MSE, &mut mse_scores)] {
            let mut config = toy_config(variant, seed);
            config.validate_every = usize::MAX;
            let outcome = train(&config, &train_set, None).map_err(|e| e.to_string())?;
            let model = outcome.best.to_model().map_err(|e| e.to_string())?;
            scores.push(evaluate(&model, &test_set).map_err(|e| e.to_string())?.mean_lab_l2());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (huber, mse) = (mean(&huber_scores), mean(&mse_scores));
    let detail = format!("mean test Lab-L2 over 3 seeds: huber {huber:.3} {huber_scores:.3?}, mse {mse:.3} {mse_scores:.3?}");
    ensure!(huber <= mse, "huber worse than mse: {detail}");
    Ok(detail)
}
