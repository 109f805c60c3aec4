//! The full adjustment network: feature extractor, bilinear head and the
//! optional preset (adjustment map) and scene-parsing heads.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adjustmap::{
    class_weights, expected_regression_loss, extract_adjustment_map, per_preset_predictions, update_frequency_ema,
    AdjustmentMap, ClassWeightState, PresetPosterior, MAX_PRESETS,
};
use crate::bilinear::{l2_normalize_backward, l2_normalize_into, normalize_lab, BilinearHeadParams, ContextInput, LAB_SCALE};
use crate::colorspace::{Lab, LabImage};
use crate::features::{BackboneConfig, FeatureExtractor, FeatureMaps, MapGradients};
use crate::impl_parameterized;
use crate::losses::{parse_cross_entropy, pixel_loss, total_loss, LossConfig, LossKind};
use crate::nn::{Linear, Parameterized};
use crate::{Error, Result};

/// Pixels per dense-inference tile.
const TILE: usize = 4096;

/// Which loss terms and which context path are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub loss: LossKind,
    /// Auxiliary scene-parsing head.
    pub multitask: bool,
    /// Context enters the bilinear head through a discrete preset map.
    pub semantic_map: bool,
}

impl Variant {
    pub const MSE: Variant = Variant {
        loss: LossKind::Mse,
        multitask: false,
        semantic_map: false,
    };
    pub const HUBER: Variant = Variant {
        loss: LossKind::Huber,
        multitask: false,
        semantic_map: false,
    };
    pub const HUBER_MT: Variant = Variant {
        loss: LossKind::Huber,
        multitask: true,
        semantic_map: false,
    };
    pub const HUBER_MT_S: Variant = Variant {
        loss: LossKind::Huber,
        multitask: true,
        semantic_map: true,
    };
    pub const HUBER_S: Variant = Variant {
        loss: LossKind::Huber,
        multitask: false,
        semantic_map: true,
    };
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.loss {
            LossKind::Huber => "huber",
            LossKind::Mse => "mse",
        })?;
        if self.multitask {
            f.write_str("+mt")?;
        }
        if self.semantic_map {
            f.write_str("+s")?;
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `mse`, `huber`, optionally followed by `+mt` and/or `+s` (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let mut parts = lower.split('+').map(str::trim);
        let loss = match parts.next() {
            Some("mse") => LossKind::Mse,
            Some("huber") => LossKind::Huber,
            _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
        };
        let mut variant = Variant {
            loss,
            multitask: false,
            semantic_map: false,
        };
        for part in parts {
            match part {
                "mt" if !variant.multitask => variant.multitask = true,
                "s" if !variant.semantic_map => variant.semantic_map = true,
                _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
            }
        }
        Ok(variant)
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: Variant,
    /// Rank of the bilinear factorization.
    pub rank: usize,
    /// Preset count; only used by the semantic-map variant.
    pub k: usize,
    pub parse_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.variant.semantic_map && !(1..=MAX_PRESETS).contains(&self.k) {
            return Err(Error::Config(format!("K must lie in 1..={MAX_PRESETS}, got {}", self.k)));
        }
        if self.variant.multitask && self.parse_classes < 2 {
            return Err(Error::Config("parse_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Width of the context fed to the bilinear head.
    pub fn head_context_dim(&self) -> usize {
        if self.variant.semantic_map {
            self.k
        } else {
            self.backbone.context_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub features: FeatureExtractor,
    pub head: BilinearHeadParams,
    /// Context vector to preset logits; present for the semantic-map variant.
    pub preset_head: Option<Linear>,
    /// Context vector to scene-parsing logits; present for multi-task variants.
    pub parse_head: Option<Linear>,
}

impl_parameterized!(Model { features, head, preset_head, parse_head });

/// Sparse regression pixels of one (augmented) image.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSample<'a> {
    pub image: &'a LabImage,
    pub coords: &'a [(usize, usize)],
    pub targets: &'a [Lab],
}

/// Sparse labelled pixels for the scene-parsing task.
#[derive(Debug, Clone, Copy)]
pub struct ParseSample<'a> {
    pub image: &'a LabImage,
    pub coords: &'a [(usize, usize)],
    pub labels: &'a [u16],
}

/// How class weights are obtained for the semantic-map loss.
#[derive(Debug, Clone, Copy)]
pub enum ClassWeighting<'a> {
    /// Advance the moving average with this batch's posteriors, then weight.
    Ema(&'a ClassWeightState),
    /// Use the given constant weights.
    Fixed(&'a [f64]),
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub l_reg: f64,
    pub l_parse: f64,
    pub total: f64,
    /// Updated state when weighting was [`ClassWeighting::Ema`].
    pub class_state: Option<ClassWeightState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Each pixel uses its most probable preset.
    #[default]
    Hard,
    /// Posterior-weighted blend of the per-preset outputs.
    Soft,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub adjusted: LabImage,
    /// Present for the semantic-map variant.
    pub posterior: Option<PresetPosterior>,
    pub map: Option<AdjustmentMap>,
}

struct ColorFeatures {
    features: Array2<f64>,
    first_layer_norms: Vec<f64>,
}

fn color_features(first_layer: &Array3<f64>, image: &LabImage, coords: &[(usize, usize)]) -> ColorFeatures {
    let c1 = first_layer.dim().2;
    let mut features = Array2::zeros((coords.len(), 3 + c1));
    let mut first_layer_norms = Vec::with_capacity(coords.len());
    for (i, &(r, c)) in coords.iter().enumerate() {
        let lab = normalize_lab(image.pixel(r, c));
        for ch in 0..3 {
            features[[i, ch]] = lab[ch];
        }
        let raw = first_layer.slice(s![r, c, ..]);
        first_layer_norms.push(l2_normalize_into(raw, features.slice_mut(s![i, 3..])));
    }
    ColorFeatures {
        features,
        first_layer_norms,
    }
}

fn color_features_backward(
    cf: &ColorFeatures,
    coords: &[(usize, usize)],
    grad_color: &Array2<f64>,
    grad_maps: &mut MapGradients,
) {
    for (i, &(r, c)) in coords.iter().enumerate() {
        let y = cf.features.slice(s![i, 3..]);
        let g = grad_color.slice(s![i, 3..]);
        let raw = l2_normalize_backward(y, cf.first_layer_norms[i], g);
        let mut dst = grad_maps.first_layer.slice_mut(s![r, c, ..]);
        dst += &raw;
    }
}

fn normalized_inputs(image: &LabImage, coords: &[(usize, usize)]) -> Array2<f64> {
    let mut out = Array2::zeros((coords.len(), 3));
    for (i, &(r, c)) in coords.iter().enumerate() {
        let v = normalize_lab(image.pixel(r, c));
        for ch in 0..3 {
            out[[i, ch]] = v[ch];
        }
    }
    out
}

fn normalized_targets(targets: &[Lab]) -> Array2<f64> {
    let mut out = Array2::zeros((targets.len(), 3));
    for (i, t) in targets.iter().enumerate() {
        let v = normalize_lab(*t);
        for ch in 0..3 {
            out[[i, ch]] = v[ch];
        }
    }
    out
}

fn to_lab(row: ArrayView1<f64>) -> Lab {
    [row[0] / LAB_SCALE[0], row[1] / LAB_SCALE[1], row[2] / LAB_SCALE[2]]
}

impl Model {
    /// Randomly initialized model. The preset head starts at zero (uniform
    /// posterior); the backbone loads pretrained weights when configured.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureExtractor::new(&mut rng, &config.backbone)?;
        let color_dim = 3 + config.backbone.first_layer_channels;
        let head = BilinearHeadParams::init(&mut rng, color_dim, config.head_context_dim(), config.rank);
        let context_dim = config.backbone.context_dim;
        let preset_head = config.variant.semantic_map.then(|| Linear::zeros(context_dim, config.k));
        let parse_head = config
            .variant
            .multitask
            .then(|| Linear::uniform(&mut rng, context_dim, config.parse_classes));
        Ok(Self {
            config,
            features,
            head,
            preset_head,
            parse_head,
        })
    }

    /// All parameters zero: every output equals its input.
    pub fn zero_initialized(config: ModelConfig) -> Result<Self> {
        let mut cfg = config.clone();
        cfg.backbone.pretrained = false;
        let mut model = Self::new(cfg, 0)?;
        model.config = config;
        model.zero_params();
        Ok(model)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Preset count for the semantic-map variant.
    pub fn k(&self) -> Option<usize> {
        self.preset_head.as_ref().map(Linear::output_dim)
    }

    /// A zero-valued gradient container with this model's layout.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    /// Loss over a batch and the gradient of `total` with respect to every
    /// parameter. The regression term is the mean over all sampled pixels;
    /// the parsing term is the mean over parse samples of their per-image
    /// cross-entropy. Class weights are constants.
    pub fn loss_and_gradients(
        &self,
        samples: &[RegressionSample],
        parse: &[ParseSample],
        weighting: ClassWeighting,
        loss: &LossConfig,
    ) -> Result<(BatchLoss, Model)> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty regression batch".into()));
        }
        let total_pixels: usize = samples.iter().map(|s| s.coords.len()).sum();
        if total_pixels == 0 {
            return Err(Error::InvalidArgument("regression batch has no pixels".into()));
        }
        let kind = self.config.variant.loss;
        let mut grad = self.zeros_like();

        struct Forward {
            maps: FeatureMaps,
            cache: crate::features::FeatureCache,
            ctx: Array2<f64>,
            ctx_cache: crate::features::ContextCache,
            color: ColorFeatures,
            posterior: Option<PresetPosterior>,
        }
        let mut forwards = Vec::with_capacity(samples.len());
        for sample in samples {
            if sample.coords.len() != sample.targets.len() {
                return Err(Error::Shape(format!(
                    "{} coordinates for {} targets",
                    sample.coords.len(),
                    sample.targets.len()
                )));
            }
            let (maps, cache) = self.features.forward(sample.image);
            let (ctx, ctx_cache) = self.features.context(&maps, sample.coords)?;
            let color = color_features(&maps.first_layer, sample.image, sample.coords);
            let posterior = self
                .preset_head
                .as_ref()
                .map(|h| PresetPosterior::from_logits(&h.forward(&ctx)));
            forwards.push(Forward {
                maps,
                cache,
                ctx,
                ctx_cache,
                color,
                posterior,
            });
        }

        let (weights, class_state) = match (&self.preset_head, weighting) {
            (None, _) => (Vec::new(), None),
            (Some(_), ClassWeighting::Fixed(w)) => (w.to_vec(), None),
            (Some(_), ClassWeighting::Ema(state)) => {
                let posts: Vec<&PresetPosterior> = forwards.iter().filter_map(|f| f.posterior.as_ref()).collect();
                let next = update_frequency_ema(state, &posts)?;
                (class_weights(&next), Some(next))
            }
        };

        let mut l_reg = 0.0;
        for (sample, fwd) in samples.iter().zip(forwards) {
            let n = sample.coords.len();
            if n == 0 {
                continue;
            }
            let share = n as f64 / total_pixels as f64;
            let inputs = normalized_inputs(sample.image, sample.coords);
            let targets = normalized_targets(sample.targets);
            let mut map_grads = MapGradients::zeros_like(&fwd.maps);
            let grad_color;
            let grad_ctx;
            match (&self.preset_head, &fwd.posterior) {
                (Some(preset_head), Some(posterior)) => {
                    let preds = per_preset_predictions(&fwd.color.features, &self.head, &inputs)?;
                    let expected = expected_regression_loss(posterior, &preds, &targets, &weights, kind, loss.delta)?;
                    l_reg += share * expected.value;
                    let hidden = self.head.color_hidden(&fwd.color.features);
                    let mut grad_hidden = Array2::zeros(hidden.raw_dim());
                    for (k, g_pred) in expected.grad_predictions.iter().enumerate() {
                        let ctx = ContextInput::OneHot(k);
                        let act = self.head.forward_with_hidden(hidden.clone(), ctx);
                        let scaled = g_pred * share;
                        let (gh, _) = self.head.backward_to_hidden(ctx, &act, &scaled, &mut grad.head);
                        grad_hidden += &gh;
                    }
                    grad_color =
                        self.head
                            .color_hidden_backward(&fwd.color.features, &hidden, &grad_hidden, &mut grad.head);
                    let grad_logits = &expected.grad_logits * share;
                    let g_ctx = preset_head.backward(&fwd.ctx, &grad_logits, grad.preset_head.as_mut().expect("layout"));
                    grad_ctx = Some(g_ctx);
                }
                _ => {
                    let ctx = ContextInput::Dense(&fwd.ctx);
                    let act = self.head.forward(&fwd.color.features, ctx)?;
                    let mut grad_residual = Array2::zeros((n, 3));
                    for i in 0..n {
                        let target = [targets[[i, 0]], targets[[i, 1]], targets[[i, 2]]];
                        let pred = [
                            inputs[[i, 0]] + act.residual[[i, 0]],
                            inputs[[i, 1]] + act.residual[[i, 1]],
                            inputs[[i, 2]] + act.residual[[i, 2]],
                        ];
                        let (value, g) = pixel_loss(kind, loss.delta, &target, &pred);
                        l_reg += value / total_pixels as f64;
                        for ch in 0..3 {
                            grad_residual[[i, ch]] = g[ch] / total_pixels as f64;
                        }
                    }
                    let (gc, g_ctx) = self.head.backward(&fwd.color.features, ctx, &act, &grad_residual, &mut grad.head);
                    grad_color = gc;
                    grad_ctx = g_ctx;
                }
            }
            color_features_backward(&fwd.color, sample.coords, &grad_color, &mut map_grads);
            if let Some(g_ctx) = grad_ctx {
                self.features
                    .context_backward(&fwd.ctx_cache, &g_ctx, &mut map_grads, &mut grad.features);
            }
            self.features.backward(&fwd.cache, map_grads, &mut grad.features);
        }

        let mut l_parse = 0.0;
        if let Some(parse_head) = &self.parse_head {
            if !parse.is_empty() {
                let scale = 1.0 / parse.len() as f64;
                for sample in parse {
                    let (maps, cache) = self.features.forward(sample.image);
                    let (ctx, ctx_cache) = self.features.context(&maps, sample.coords)?;
                    let logits = parse_head.forward(&ctx);
                    let (ce, g_logits) = parse_cross_entropy(&logits, sample.labels)?;
                    l_parse += scale * ce;
                    let g_logits = g_logits * (scale * loss.lambda);
                    let g_ctx = parse_head.backward(&ctx, &g_logits, grad.parse_head.as_mut().expect("layout"));
                    let mut map_grads = MapGradients::zeros_like(&maps);
                    self.features
                        .context_backward(&ctx_cache, &g_ctx, &mut map_grads, &mut grad.features);
                    self.features.backward(&cache, map_grads, &mut grad.features);
                }
            }
        }

        Ok((
            BatchLoss {
                l_reg,
                l_parse,
                total: total_loss(l_reg, l_parse, loss.lambda),
                class_state,
            },
            grad,
        ))
    }

    /// Dense hard inference: every pixel adjusted, plus the extracted map
    /// for the semantic-map variant.
    pub fn infer(&self, image: &LabImage) -> Result<Inference> {
        self.infer_with(image, InferenceMode::Hard)
    }

    pub fn infer_with(&self, image: &LabImage, mode: InferenceMode) -> Result<Inference> {
        let (h, w) = image.shape();
        let (maps, _) = self.features.forward(image);
        let coords: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
        let mut adjusted = image.clone();
        let mut probabilities = self.preset_head.as_ref().map(|head| Array2::zeros((h * w, head.output_dim())));
        for (tile_index, tile) in coords.chunks(TILE).enumerate() {
            let start = tile_index * TILE;
            let (ctx, _) = self.features.context(&maps, tile)?;
            let color = color_features(&maps.first_layer, image, tile);
            let inputs = normalized_inputs(image, tile);
            let outputs = match &self.preset_head {
                Some(head) => {
                    let posterior = PresetPosterior::from_logits(&head.forward(&ctx));
                    let preds = per_preset_predictions(&color.features, &self.head, &inputs)?;
                    let probs = posterior.probabilities();
                    probabilities
                        .as_mut()
                        .expect("semantic-map variant")
                        .slice_mut(s![start..start + tile.len(), ..])
                        .assign(probs);
                    match mode {
                        InferenceMode::Hard => {
                            let chosen = extract_adjustment_map(&posterior, 1, tile.len())?;
                            select_rows(&preds, |i| chosen.assignments()[i] as usize, tile.len())
                        }
                        InferenceMode::Soft => {
                            let mut out = Array2::zeros((tile.len(), 3));
                            for (k, pred) in preds.iter().enumerate() {
                                out += &(pred * &probs.column(k).insert_axis(ndarray::Axis(1)));
                            }
                            out
                        }
                    }
                }
                None => {
                    let act = self.head.forward(&color.features, ContextInput::Dense(&ctx))?;
                    act.residual + &inputs
                }
            };
            write_rows(&mut adjusted, tile, &outputs, &inputs);
        }
        let (posterior, map) = match probabilities {
            Some(p) => {
                let posterior = PresetPosterior::from_probabilities(p)?;
                let map = extract_adjustment_map(&posterior, h, w)?;
                (Some(posterior), Some(map))
            }
            None => (None, None),
        };
        Ok(Inference {
            adjusted,
            posterior,
            map,
        })
    }

    /// Adjusts `image` using the presets named by `map` instead of the model's
    /// own posterior. Identical to [`Model::infer`] when `map` is the model's
    /// extracted map.
    pub fn adjust_with_map(&self, image: &LabImage, map: &AdjustmentMap) -> Result<LabImage> {
        let k = self
            .k()
            .ok_or_else(|| Error::InvalidArgument(format!("variant {} has no adjustment map", self.variant())))?;
        if map.k() != k {
            return Err(Error::InvalidArgument(format!("map has K = {}, model has K = {k}", map.k())));
        }
        let (h, w) = image.shape();
        if (map.height(), map.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "map is {}x{}, image is {h}x{w}",
                map.height(),
                map.width()
            )));
        }
        let first_layer = self.features.first_layer(image);
        let coords: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
        let mut adjusted = image.clone();
        for (tile_index, tile) in coords.chunks(TILE).enumerate() {
            let start = tile_index * TILE;
            let color = color_features(&first_layer, image, tile);
            let inputs = normalized_inputs(image, tile);
            let preds = per_preset_predictions(&color.features, &self.head, &inputs)?;
            let outputs = select_rows(&preds, |i| map.assignments()[start + i] as usize, tile.len());
            write_rows(&mut adjusted, tile, &outputs, &inputs);
        }
        Ok(adjusted)
    }

    /// Output of preset `k` for each Lab color, treating each as a
    /// one-pixel image; used for preset previews.
    pub fn preset_swatch(&self, colors: &[Lab], k: usize) -> Result<Vec<Lab>> {
        let image = LabImage::from_fn(1, colors.len(), |_, c| colors[c]);
        let map = AdjustmentMap::uniform(1, colors.len(), self.k().unwrap_or(0).max(1), k)?;
        let out = self.adjust_with_map(&image, &map)?;
        Ok(out.pixels().collect())
    }
}

fn select_rows(preds: &[Array2<f64>], choice: impl Fn(usize) -> usize, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, 3));
    for i in 0..n {
        out.row_mut(i).assign(&preds[choice(i)].row(i));
    }
    out
}

/// Writes `image + (rows - inputs)` back in Lab units. Adding the residual
/// to the original pixel keeps a zero residual bit-exact.
fn write_rows(image: &mut LabImage, coords: &[(usize, usize)], rows: &Array2<f64>, inputs: &Array2<f64>) {
    for (i, &(r, c)) in coords.iter().enumerate() {
        let delta = to_lab((&rows.row(i) - &inputs.row(i)).view());
        let p = image.pixel(r, c);
        image.set_pixel(r, c, [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]]);
    }
}
