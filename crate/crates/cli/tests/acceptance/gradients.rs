use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semadjust_core::colorspace::Lab;
use semadjust_core::features::BackboneConfig;
use semadjust_core::losses::{LossConfig, LossKind};
use semadjust_core::model::{ClassWeighting, Model, ModelConfig, ParseSample, RegressionSample, Variant};
use semadjust_core::nn::Parameterized;

use crate::common::{ensure, relative_error, textured};
use crate::Outcome;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Entries probed per tensor, spread evenly over its length.
const PROBES_PER_TENSOR: usize = 5;

const GROUPS: [(&str, &str); 6] = [
    ("features.backbone.", "backbone"),
    ("features.rnn.", "spatial rnn"),
    ("features.squeeze.", "squeeze"),
    ("head.", "bilinear head"),
    ("preset_head.", "posterior head"),
    ("parse_head.", "parse head"),
];

fn group_of(name: &str) -> Option<usize> {
    GROUPS.iter().position(|(prefix, _)| name.starts_with(prefix))
}

pub fn criterion() -> Outcome {
    let config = ModelConfig {
        backbone: BackboneConfig::toy(),
        variant: Variant::HUBER_MT_S,
        rank: 8,
        k: 3,
        parse_classes: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut model = Model::new(config, 7).map_err(|e| e.to_string())?;
    // Positive shifts keep ReLU inputs away from their kink so central
    // differences see a smooth function; every parameter stays trainable.
    for p in model.params_mut() {
        if p.name.ends_with("bias") || p.name.ends_with("beta") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
        }
    }
    let preset_head = model.preset_head.as_mut().unwrap();
    preset_head.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));

    let image = textured(16, 16, 0.3);
    let coords: Vec<(usize, usize)> = (0..14).map(|i| ((i * 5) % 16, (i * 11 + 3) % 16)).collect();
    // Offsets mix errors inside and beyond the Huber changepoint.
    let targets: Vec<Lab> = coords
        .iter()
        .map(|&(r, c)| {
            let x = image.pixel(r, c);
            [
                x[0] + rng.random_range(-9.0..9.0),
                x[1] + rng.random_range(-9.0..9.0),
                x[2] + rng.random_range(-9.0..9.0),
            ]
        })
        .collect();
    let parse_image = textured(16, 16, 1.7);
    let parse_coords: Vec<(usize, usize)> = (0..10).map(|i| ((i * 3) % 16, (i * 7 + 1) % 16)).collect();
    let labels: Vec<u16> = (0..10).map(|i| (i % 4) as u16).collect();

    let samples = [RegressionSample {
        image: &image,
        coords: &coords,
        targets: &targets,
    }];
    let parse = [ParseSample {
        image: &parse_image,
        coords: &parse_coords,
        labels: &labels,
    }];
    let weights = [0.9, 0.7, 0.85];
    let loss_config = LossConfig {
        kind: LossKind::Huber,
        delta: 0.04,
        lambda: 0.3,
        parse_classes: 4,
    };
    let total = |m: &Model| -> f64 {
        m.loss_and_gradients(&samples, &parse, ClassWeighting::Fixed(&weights), &loss_config)
            .expect("loss evaluates")
            .0
            .total
    };

    let (loss, grads) = model
        .loss_and_gradients(&samples, &parse, ClassWeighting::Fixed(&weights), &loss_config)
        .map_err(|e| e.to_string())?;
    ensure!(loss.l_parse > 0.0 && loss.l_reg > 0.0, "both loss terms must be active, got {loss:?}");
    let analytic: Vec<(String, Vec<f64>)> = grads.params().iter().map(|p| (p.name.clone(), p.data.to_vec())).collect();

    let mut worst: [(f64, String); GROUPS.len()] = Default::default();
    let mut counts = [0usize; GROUPS.len()];
    let mut probe = model.clone();
    for (t, (name, values)) in analytic.iter().enumerate() {
        let group = group_of(name).ok_or_else(|| format!("parameter {name} belongs to no group"))?;
        for i in (0..values.len()).step_by(values.len().div_ceil(PROBES_PER_TENSOR)) {
            let orig = probe.params()[t].data[i];
            probe.params_mut()[t].data[i] = orig + STEP;
            let plus = total(&probe);
            probe.params_mut()[t].data[i] = orig - STEP;
            let minus = total(&probe);
            probe.params_mut()[t].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let rel = relative_error(values[i], numeric, 1e-6);
            if rel > worst[group].0 || counts[group] == 0 {
                worst[group] = (rel, format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", values[i]));
            }
            counts[group] += 1;
        }
    }

    let mut summary = Vec::new();
    for (g, (_, label)) in GROUPS.iter().enumerate() {
        ensure!(counts[g] > 0, "no {label} parameters were checked");
        ensure!(
            worst[g].0 <= TOLERANCE,
            "{label}: relative error {:.3e} > {TOLERANCE:e} at {}",
            worst[g].0,
            worst[g].1
        );
        summary.push(format!("{label} {:.1e} ({} entries)", worst[g].0, counts[g]));
    }
    Ok(format!("max relative error per group: {}", summary.join(", ")))
}
