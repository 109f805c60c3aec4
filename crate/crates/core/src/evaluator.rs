//! Per-effect mean Lab-L2 reports, preset-recovery accuracy and variant
//! comparison tables.

use std::fmt::Write as _;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::adjustmap::AdjustmentMap;
use crate::checkpoint::ModelCheckpoint;
use crate::colorspace::lab_l2_distance;
use crate::data::{AdjustmentExample, Effect};
use crate::model::Model;
use crate::{Error, Result};

/// Largest `K` accepted by [`map_accuracy`] (it enumerates `K!` relabelings).
pub const MAX_ACCURACY_PRESETS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub effect: Effect,
    pub images: usize,
    /// Mean over images of the per-image mean Lab-L2 between output and target.
    pub lab_l2: f64,
    /// Same, between input and target.
    pub baseline_lab_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Ordered by effect.
    pub effects: Vec<EffectReport>,
    /// Mean preset-recovery accuracy over images with ground-truth layouts,
    /// for models that produce adjustment maps.
    pub map_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn effect(&self, effect: Effect) -> Option<&EffectReport> {
        self.effects.iter().find(|e| e.effect == effect)
    }

    /// Image-weighted mean over effects.
    pub fn mean_lab_l2(&self) -> f64 {
        weighted_mean(self.effects.iter().map(|e| (e.lab_l2, e.images)))
    }

    pub fn mean_baseline(&self) -> f64 {
        weighted_mean(self.effects.iter().map(|e| (e.baseline_lab_l2, e.images)))
    }

    /// CSV with columns `effect,images,lab_l2,baseline_lab_l2`; a trailing
    /// `map_accuracy` row carries the accuracy in the `lab_l2` column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["effect", "images", "lab_l2", "baseline_lab_l2"])?;
        for e in &self.effects {
            w.write_record([
                e.effect.to_string(),
                e.images.to_string(),
                e.lab_l2.to_string(),
                e.baseline_lab_l2.to_string(),
            ])?;
        }
        if let Some(acc) = self.map_accuracy {
            w.write_record(["map_accuracy".to_string(), String::new(), acc.to_string(), String::new()])?;
        }
        finish_csv(w)
    }
}

fn weighted_mean(items: impl Iterator<Item = (f64, usize)>) -> f64 {
    let (sum, n) = items.fold((0.0, 0usize), |(s, n), (v, k)| (s + v * k as f64, n + k));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Sum of values after sorting, so the result does not depend on input order.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Dense hard inference over `dataset`, reported per effect next to the
/// input-vs-target baseline.
pub fn evaluate(model: &Model, dataset: &[AdjustmentExample]) -> Result<EvalReport> {
    evaluate_with(model, dataset, model.variant().to_string())
}

pub fn evaluate_checkpoint(checkpoint: &ModelCheckpoint, dataset: &[AdjustmentExample]) -> Result<EvalReport> {
    evaluate(&checkpoint.to_model()?, dataset)
}

pub fn evaluate_with(model: &Model, dataset: &[AdjustmentExample], label: String) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let mut per_effect: Vec<(Effect, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut accuracies = Vec::new();
    for ex in dataset {
        let out = model.infer(&ex.input)?;
        let model_d = lab_l2_distance(&out.adjusted, &ex.target, None)?;
        let base_d = lab_l2_distance(&ex.input, &ex.target, None)?;
        match per_effect.iter_mut().find(|(e, _, _)| *e == ex.effect) {
            Some((_, m, b)) => {
                m.push(model_d);
                b.push(base_d);
            }
            None => per_effect.push((ex.effect, vec![model_d], vec![base_d])),
        }
        if let (Some(map), Some(truth)) = (&out.map, &ex.parse_labels) {
            let truth: Vec<u16> = truth.iter().copied().collect();
            if truth.iter().all(|&t| (t as usize) < map.k()) {
                accuracies.push(map_accuracy(map, &truth)?);
            }
        }
    }
    per_effect.sort_by_key(|(e, _, _)| *e);
    let effects = per_effect
        .into_iter()
        .map(|(effect, m, b)| EffectReport {
            effect,
            images: m.len(),
            lab_l2: order_free_mean(m),
            baseline_lab_l2: order_free_mean(b),
        })
        .collect();
    Ok(EvalReport {
        label,
        effects,
        map_accuracy: (!accuracies.is_empty()).then(|| order_free_mean(accuracies)),
    })
}

/// Fraction of pixels where `predicted` agrees with `truth`, maximized over
/// every relabeling of the predicted presets.
pub fn map_accuracy(predicted: &AdjustmentMap, truth: &[u16]) -> Result<f64> {
    let k = predicted.k();
    if k > MAX_ACCURACY_PRESETS {
        return Err(Error::InvalidArgument(format!(
            "map accuracy enumerates K! relabelings; K = {k} exceeds {MAX_ACCURACY_PRESETS}"
        )));
    }
    if truth.len() != predicted.assignments().len() {
        return Err(Error::Shape(format!(
            "{} truth labels for {} map pixels",
            truth.len(),
            predicted.assignments().len()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t as usize >= k) {
        return Err(Error::PresetIndex { index: bad as usize, k });
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in predicted.assignments().iter().zip(truth) {
        confusion[p as usize][t as usize] += 1;
    }
    let best = (0..k)
        .permutations(k)
        .map(|perm| (0..k).map(|p| confusion[p][perm[p]]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / truth.len() as f64)
}

/// Aligned text and CSV with one row per report (in the given order) and one
/// column per effect present in any report.
pub fn variant_table(reports: &[EvalReport]) -> Result<(String, String)> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("variant table needs at least one report".into()));
    }
    let effects: Vec<Effect> = reports
        .iter()
        .flat_map(|r| r.effects.iter().map(|e| e.effect))
        .sorted()
        .dedup()
        .collect();
    let mut header = vec!["variant".to_string()];
    header.extend(effects.iter().map(|e| e.to_string()));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(
                effects
                    .iter()
                    .map(|&e| r.effect(e).map_or_else(String::new, |x| format!("{:.4}", x.lab_l2))),
            );
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|i| std::iter::once(&header).chain(&rows).map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        writeln!(text, "{}", cells.join("  ").trim_end()).expect("string write");
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for row in &rows {
        w.write_record(row)?;
    }
    Ok((text, finish_csv(w)?))
}
