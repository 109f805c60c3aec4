//! Optimization loop: batch assembly, variant-specific losses, per-group
//! learning rates, class-weight tracking, validation and checkpointing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjustmap::ClassWeightState;
use crate::checkpoint::ModelCheckpoint;
use crate::colorspace::{lab_l2_distance, Lab};
use crate::config::TrainConfig;
use crate::data::{augment, sample_sparse_pixels, AdjustmentExample};
use crate::model::{ClassWeighting, Model, ParseSample, RegressionSample};
use crate::nn::{Adam, Parameterized};
use crate::{Error, Result};

/// Parameter-name prefix of the backbone group.
pub const BACKBONE_PREFIX: &str = "features.backbone.";

/// Seed offset separating the scene-parsing sampling stream from the main one.
const PARSE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub l_reg: f64,
    pub l_parse: f64,
    pub total: f64,
    /// Set on steps after which validation ran.
    pub val_lab_l2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation Lab-L2 (the last one without a
    /// validation split).
    pub best: ModelCheckpoint,
    pub last: ModelCheckpoint,
    pub log: Vec<LogRow>,
}

/// Deterministic `(train, validation)` index split; the validation share is
/// `round(n * fraction)`, and at least one image always remains for training.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

/// Learning rate for a named tensor.
pub fn rate_for(config: &TrainConfig, name: &str) -> f64 {
    if name.starts_with(BACKBONE_PREFIX) {
        config.learning_rate * config.backbone_lr_multiplier
    } else {
        config.learning_rate
    }
}

struct PreparedSample {
    image: crate::colorspace::LabImage,
    coords: Vec<(usize, usize)>,
    targets: Vec<Lab>,
}

struct PreparedParse {
    image: crate::colorspace::LabImage,
    coords: Vec<(usize, usize)>,
    labels: Vec<u16>,
}

fn prepare(example: &AdjustmentExample, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PreparedSample> {
    let aug = augment(example, rng.random(), config.canvas);
    let (h, w) = aug.shape();
    let batch = sample_sparse_pixels(&aug, config.pixels_per_image.min(h * w), rng.random())?;
    Ok(PreparedSample {
        image: aug.input,
        coords: batch.coordinates,
        targets: batch.target_colors,
    })
}

fn prepare_parse(example: &AdjustmentExample, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PreparedParse> {
    let aug = augment(example, rng.random(), config.canvas);
    let (h, w) = aug.shape();
    let batch = sample_sparse_pixels(&aug, config.pixels_per_image.min(h * w), rng.random())?;
    let labels = aug.parse_labels.as_ref().expect("checked before training");
    Ok(PreparedParse {
        labels: batch.coordinates.iter().map(|&(r, c)| labels[[r, c]]).collect(),
        image: aug.input,
        coords: batch.coordinates,
    })
}

/// Mean over `examples` of the per-image Lab-L2 of dense inference.
pub fn validation_lab_l2(model: &Model, examples: &[&AdjustmentExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let out = model.infer(&ex.input)?;
        total += lab_l2_distance(&out.adjusted, &ex.target, None)?;
    }
    Ok(total / examples.len() as f64)
}

pub fn train(
    config: &TrainConfig,
    dataset: &[AdjustmentExample],
    parse_dataset: Option<&[AdjustmentExample]>,
) -> Result<TrainOutcome> {
    train_with_observer(config, dataset, parse_dataset, |_| {})
}

/// [`train`], calling `observe` after every optimizer step.
pub fn train_with_observer(
    config: &TrainConfig,
    dataset: &[AdjustmentExample],
    parse_dataset: Option<&[AdjustmentExample]>,
    mut observe: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let parse_pool: &[AdjustmentExample] = match (config.variant.multitask, parse_dataset) {
        (false, _) => &[],
        (true, None) => {
            return Err(Error::InvalidArgument(format!(
                "variant {} needs a scene-parsing dataset",
                config.variant
            )))
        }
        (true, Some(p)) => {
            if p.is_empty() {
                return Err(Error::InvalidArgument("scene-parsing dataset is empty".into()));
            }
            if let Some(ex) = p.iter().find(|e| e.parse_labels.is_none()) {
                return Err(Error::Dataset(format!("{} has no parse labels", ex.name)));
            }
            p
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut parse_rng = ChaCha8Rng::seed_from_u64(config.seed ^ PARSE_STREAM);
    let (train_idx, val_idx) = split_validation(dataset.len(), config.validation_fraction, rng.random());
    let val_set: Vec<&AdjustmentExample> = val_idx.iter().map(|&i| &dataset[i]).collect();

    let mut model = Model::new(config.model_config(), config.seed)?;
    let mut adam = Adam::new(config.adam, &model);
    let mut class_state = if config.variant.semantic_map {
        Some(ClassWeightState::new(config.k, config.alpha)?)
    } else {
        None
    };

    let mut log = Vec::new();
    let mut best: Option<(f64, ModelCheckpoint)> = None;
    let mut parse_order: Vec<usize> = Vec::new();
    let mut step = 0u64;
    let mut order = train_idx.clone();
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<Vec<usize>> = order.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
        let n_batches = batches.len();
        for (b, batch) in batches.into_iter().enumerate() {
            let prepared: Vec<PreparedSample> = batch
                .iter()
                .map(|&i| prepare(&dataset[i], config, &mut rng))
                .collect::<Result<_>>()?;
            let mut parse_prepared = Vec::new();
            if !parse_pool.is_empty() {
                for _ in 0..batch.len() {
                    if parse_order.is_empty() {
                        parse_order = (0..parse_pool.len()).collect();
                        parse_order.shuffle(&mut parse_rng);
                        parse_order.reverse();
                    }
                    let i = parse_order.pop().expect("refilled");
                    parse_prepared.push(prepare_parse(&parse_pool[i], config, &mut parse_rng)?);
                }
            }
            let samples: Vec<RegressionSample> = prepared
                .iter()
                .map(|p| RegressionSample {
                    image: &p.image,
                    coords: &p.coords,
                    targets: &p.targets,
                })
                .collect();
            let parse_samples: Vec<ParseSample> = parse_prepared
                .iter()
                .map(|p| ParseSample {
                    image: &p.image,
                    coords: &p.coords,
                    labels: &p.labels,
                })
                .collect();
            let weighting = match &class_state {
                Some(s) => ClassWeighting::Ema(s),
                None => ClassWeighting::Fixed(&[]),
            };
            let (loss, mut grad) = model.loss_and_gradients(&samples, &parse_samples, weighting, &config.loss)?;
            step += 1;
            let grad_finite = grad.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()));
            if !loss.total.is_finite() || !grad_finite {
                return Err(Error::NonFinite {
                    step: step as usize,
                    detail: format!(
                        "l_reg = {}, l_parse = {}, gradients finite: {grad_finite}",
                        loss.l_reg, loss.l_parse
                    ),
                });
            }
            if let Some(clip) = config.grad_clip {
                let norm = grad
                    .params()
                    .iter()
                    .flat_map(|p| p.data.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    let scale = clip / norm;
                    for p in grad.params_mut() {
                        p.data.iter_mut().for_each(|v| *v *= scale);
                    }
                }
            }
            adam.step(&mut model, &grad, |name| rate_for(config, name));
            if let Some(next) = loss.class_state {
                class_state = Some(next);
            }

            let stop = config.max_steps.is_some_and(|m| step >= m);
            let epoch_end = b + 1 == n_batches;
            let last_epoch = epoch + 1 == config.epochs;
            let validate = !val_set.is_empty()
                && (stop || (epoch_end && ((epoch + 1) % config.validate_every == 0 || last_epoch)));
            let mut row = LogRow {
                step,
                epoch,
                l_reg: loss.l_reg,
                l_parse: loss.l_parse,
                total: loss.total,
                val_lab_l2: None,
            };
            if validate {
                let v = validation_lab_l2(&model, &val_set)?;
                row.val_lab_l2 = Some(v);
                log::info!("step {step} epoch {epoch}: loss {:.6}, validation Lab-L2 {v:.4}", loss.total);
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, ModelCheckpoint::from_model(&model, config, class_state.clone(), step)));
                }
            }
            observe(&row);
            log.push(row);
            if stop {
                break 'epochs;
            }
        }
    }

    let last = ModelCheckpoint::from_model(&model, config, class_state, step);
    Ok(TrainOutcome {
        best: best.map_or_else(|| last.clone(), |(_, c)| c),
        last,
        log,
    })
}

pub fn log_csv_string(rows: &[LogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "epoch", "l_reg", "l_parse", "total", "val_lab_l2"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.l_reg.to_string(),
            r.l_parse.to_string(),
            r.total.to_string(),
            r.val_lab_l2.map_or_else(String::new, |v| v.to_string()),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, log_csv_string(rows)?).map_err(|e| Error::io(path, e))
}
