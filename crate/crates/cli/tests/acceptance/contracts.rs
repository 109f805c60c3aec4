//! Identity, map-echo and reproducibility guarantees.

use std::io::Cursor;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde_json::{json, Value};
use tower::ServiceExt;

use semadjust_core::checkpoint::ModelCheckpoint;
use semadjust_core::colorspace::lab_to_srgb;
use semadjust_core::config::TrainConfig;
use semadjust_core::data::{generate_synthetic_benchmark, SyntheticSpec};
use semadjust_core::evaluator::evaluate;
use semadjust_core::model::{Model, Variant};
use semadjust_core::trainer::{log_csv_string, train};
use semadjust_service::{app, AdjustResponse, AppState};

use crate::common::{ensure, textured};
use crate::Outcome;

fn synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<semadjust_core::data::AdjustmentExample>, String> {
    let spec = SyntheticSpec {
        height: size,
        width: size,
        ..SyntheticSpec::two_presets()
    };
    generate_synthetic_benchmark(&spec, n, seed).map_err(|e| e.to_string())
}

fn identity_model() -> Outcome {
    let data = synthetic(10, 64, 3)?;
    let mut checked = 0;
    for variant in [Variant::MSE, Variant::HUBER, Variant::HUBER_MT, Variant::HUBER_MT_S, Variant::HUBER_S] {
        let model = Model::zero_initialized(TrainConfig::toy().with_variant(variant).model_config()).map_err(|e| e.to_string())?;
        for ex in &data {
            let out = model.infer(&ex.input).map_err(|e| e.to_string())?;
            ensure!(out.adjusted == ex.input, "{variant}: output of {} differs from its input", ex.name);
        }
        let report = evaluate(&model, &data).map_err(|e| e.to_string())?;
        for e in &report.effects {
            ensure!(
                e.lab_l2.to_bits() == e.baseline_lab_l2.to_bits(),
                "{variant}: report {} != baseline {}",
                e.lab_l2,
                e.baseline_lab_l2
            );
        }
        checked += 1;
    }
    Ok(format!("zero model reproduces inputs and baseline exactly for {checked} variants"))
}

/// Random weights with a preset head that uses both presets.
fn two_preset_model() -> Result<Model, String> {
    let config = TrainConfig::toy().with_variant(Variant::HUBER_S);
    let mut model = Model::new(config.model_config(), 17).map_err(|e| e.to_string())?;
    let head = model.preset_head.as_mut().unwrap();
    head.weight
        .iter_mut()
        .enumerate()
        .for_each(|(i, w)| *w = 4.0 * ((i as f64) * 1.3).sin());
    model.head.output_bias.iter_mut().enumerate().for_each(|(i, v)| *v = 0.2 * (i as f64 - 1.0));
    Ok(model)
}

async fn post_adjust(state: &AppState, body: Value) -> Result<AdjustResponse, String> {
    let request = Request::builder()
        .method("POST")
        .uri("/adjust")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .map_err(|e| e.to_string())?;
    let response = app(state.clone()).oneshot(request).await.map_err(|e| e.to_string())?;
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.map_err(|e| e.to_string())?;
    ensure!(status == StatusCode::OK, "status {status}: {}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn map_echo() -> Outcome {
    let model = two_preset_model()?;
    let state = AppState::new(model, 0);
    let rgb = lab_to_srgb(&textured(48, 40, 0.9));
    let mut png = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png).map_err(|e| e.to_string())?;
    let image = STANDARD.encode(png);

    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let auto = post_adjust(&state, json!({ "image": image })).await?;
        let map = auto.map.clone().ok_or("automatic path returned no map")?;
        let mut used = map.rle.runs.iter().map(|r| r[0]).collect::<Vec<_>>();
        used.sort();
        used.dedup();
        ensure!(used.len() == 2, "probe map uses presets {used:?}; both should appear");
        for (label, user_map) in [("png", json!(map.png)), ("rle", serde_json::to_value(&map.rle).unwrap())] {
            let echoed = post_adjust(&state, json!({ "image": image, "user_map": user_map })).await?;
            ensure!(echoed.adjusted == auto.adjusted, "{label} echo changes the adjusted image");
            ensure!(echoed.map == auto.map, "{label} echo changes the returned map");
        }
        Ok(format!("{}-run map echoed as png and rle gives identical output", map.rle.runs.len()))
    })
}

pub fn identity_and_echo() -> Outcome {
    Ok(format!("{}; {}", identity_model()?, map_echo()?))
}

pub fn reproducibility() -> Outcome {
    let data = synthetic(8, 32, 21)?;
    let mut config = TrainConfig::toy().with_variant(Variant::HUBER_S);
    config.canvas = 32;
    config.batch_size = 2;
    config.max_steps = Some(24);
    config.learning_rate = 3e-3;
    config.seed = 9;

    let first = train(&config, &data, None).map_err(|e| e.to_string())?;
    let second = train(&config, &data, None).map_err(|e| e.to_string())?;
    let (log_a, log_b) = (
        log_csv_string(&first.log).map_err(|e| e.to_string())?,
        log_csv_string(&second.log).map_err(|e| e.to_string())?,
    );
    ensure!(log_a == log_b, "loss logs differ between identical runs");
    ensure!(first.log.iter().any(|r| r.val_lab_l2.is_some()), "no validation rows were logged");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("probe.bin");
    first.best.save(&path).map_err(|e| e.to_string())?;
    let loaded = ModelCheckpoint::load(&path).map_err(|e| e.to_string())?;
    ensure!(
        loaded.to_bytes().map_err(|e| e.to_string())? == first.best.to_bytes().map_err(|e| e.to_string())?,
        "reloaded checkpoint serializes differently"
    );
    let before = first.best.to_model().map_err(|e| e.to_string())?;
    let after = loaded.to_model().map_err(|e| e.to_string())?;
    let probe = textured(40, 36, 2.2);
    let (a, b) = (
        before.infer(&probe).map_err(|e| e.to_string())?,
        after.infer(&probe).map_err(|e| e.to_string())?,
    );
    let bits = |v: &ndarray::Array3<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure!(bits(a.adjusted.data()) == bits(b.adjusted.data()), "probe outputs differ after reload");
    let pa = a.posterior.ok_or("no posterior")?;
    let pb = b.posterior.ok_or("no posterior")?;
    ensure!(
        pa.probabilities().iter().map(|x| x.to_bits()).eq(pb.probabilities().iter().map(|x| x.to_bits())),
        "probe posteriors differ after reload"
    );
    Ok(format!(
        "{} identical log rows; reloaded checkpoint gives bit-identical probe output",
        first.log.len()
    ))
}
