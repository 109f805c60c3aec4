use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use semadjust_core::adjustmap::{decode_indexed_png, encode_indexed_png, AdjustmentMap, RleMap};
use semadjust_core::checkpoint::ModelCheckpoint;
use semadjust_core::config::ConfigFile;
use semadjust_core::data::{
    generate_synthetic_benchmark, load_dataset, read_lab_png, save_dataset, write_lab_png, AdjustmentExample, Effect,
    SyntheticSpec,
};
use semadjust_core::evaluator::{evaluate_with, variant_table};
use semadjust_core::model::InferenceMode;
use semadjust_core::trainer::{train_with_observer, write_log_csv};

use crate::{AdjustArgs, EvalArgs, ServeArgs, SynthArgs, TrainArgs};

/// Names of the files `train` writes inside `--out`.
pub const BEST_CHECKPOINT: &str = "checkpoint.bin";
pub const LAST_CHECKPOINT: &str = "last.bin";
pub const LOSS_LOG: &str = "log.csv";
pub const EFFECTIVE_CONFIG: &str = "config.toml";

fn load_examples(root: &Path, effect: Option<Effect>) -> Result<Vec<AdjustmentExample>> {
    if !root.exists() {
        bail!("dataset {} does not exist", root.display());
    }
    let mut data = load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))?;
    if let Some(effect) = effect {
        data.retain(|e| e.effect == effect);
    }
    if data.is_empty() {
        bail!("dataset {} holds no examples", root.display());
    }
    Ok(data)
}

/// Config file keys with relative paths anchored at the file's directory.
fn read_config_file(path: &Path) -> Result<ConfigFile> {
    let mut file = ConfigFile::from_file(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for key in [&mut file.data, &mut file.parse_data, &mut file.pretrained_path] {
        if let Some(p) = key.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
    }
    Ok(file)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => read_config_file(path)?,
        None => ConfigFile::default(),
    };
    let merged = file.overlaid(&args.keys.into());
    let config = merged.apply(None)?;
    let Some(data_root) = merged.data.clone() else {
        bail!("no training data: pass --data or set `data` in the config file");
    };
    let data = load_examples(&data_root, args.effect)?;
    let mut effects: Vec<Effect> = data.iter().map(|x| x.effect).collect();
    effects.sort();
    effects.dedup();
    if effects.len() > 1 {
        bail!(
            "dataset {} holds several effects ({}); pick one with --effect",
            data_root.display(),
            effects.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        );
    }
    let parse_data = match (&merged.parse_data, config.variant.multitask) {
        (Some(path), _) => Some(load_examples(path, None)?),
        (None, true) if data.iter().all(|e| e.parse_labels.is_some()) => Some(data.clone()),
        _ => None,
    };

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let config_path = args.out.join(EFFECTIVE_CONFIG);
    std::fs::write(&config_path, config.to_toml_string()).with_context(|| format!("writing {}", config_path.display()))?;

    log::info!(
        "training {} on {} images from {}",
        config.variant,
        data.len(),
        data_root.display()
    );
    let outcome = train_with_observer(&config, &data, parse_data.as_deref(), |row| {
        if row.step % 50 == 0 {
            log::info!("step {} epoch {}: loss {:.6}", row.step, row.epoch, row.total);
        }
    })?;
    outcome.best.save(&args.out.join(BEST_CHECKPOINT))?;
    outcome.last.save(&args.out.join(LAST_CHECKPOINT))?;
    write_log_csv(&args.out.join(LOSS_LOG), &outcome.log)?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let data = load_examples(&args.data, args.effect)?;
    let mut reports = Vec::new();
    for path in &args.ckpts {
        let model = ModelCheckpoint::load(path)?.to_model()?;
        let label = if args.ckpts.len() == 1 {
            model.variant().to_string()
        } else {
            format!("{} ({})", model.variant(), path.display())
        };
        reports.push(evaluate_with(&model, &data, label)?);
    }
    let (text, csv) = if let [report] = reports.as_slice() {
        let mut text = String::new();
        for e in &report.effects {
            text.push_str(&format!(
                "{:<20} images {:>4}  lab_l2 {:.4}  baseline {:.4}\n",
                e.effect.to_string(),
                e.images,
                e.lab_l2,
                e.baseline_lab_l2
            ));
        }
        if let Some(acc) = report.map_accuracy {
            text.push_str(&format!("map_accuracy {acc:.4}\n"));
        }
        (text, report.to_csv()?)
    } else {
        variant_table(&reports)?
    };
    std::fs::write(&args.report, csv).with_context(|| format!("writing {}", args.report.display()))?;
    if let Some(path) = &args.text {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn read_user_map(path: &Path, k: usize) -> Result<AdjustmentMap> {
    let bytes = std::fs::read(path).with_context(|| format!("reading map {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let map = if is_json {
        let rle: RleMap =
            serde_json::from_slice(&bytes).with_context(|| format!("parsing run-length map {}", path.display()))?;
        if rle.k != k {
            bail!("map {} declares K = {}, model has K = {k}", path.display(), rle.k);
        }
        rle.decode()
    } else {
        decode_indexed_png(&bytes, k)
    };
    map.with_context(|| format!("decoding map {}", path.display()))
}

/// `<dir>/<stem>.map.png` for an output path.
fn default_map_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.map.png"))
}

pub fn adjust(args: AdjustArgs) -> Result<()> {
    let model = ModelCheckpoint::load(&args.ckpt)?.to_model()?;
    let image = read_lab_png(&args.input)?;
    let (adjusted, map) = match &args.map {
        Some(path) => {
            let Some(k) = model.k() else {
                bail!("variant {} has no adjustment map to substitute", model.variant());
            };
            let map = read_user_map(path, k)?;
            if (map.height(), map.width()) != image.shape() {
                bail!(
                    "map {} is {}x{}, image {} is {}x{}",
                    path.display(),
                    map.height(),
                    map.width(),
                    args.input.display(),
                    image.height(),
                    image.width()
                );
            }
            (model.adjust_with_map(&image, &map)?, Some(map))
        }
        None => {
            let mode = if args.soft {
                InferenceMode::Soft
            } else {
                InferenceMode::Hard
            };
            let out = model.infer_with(&image, mode)?;
            (out.adjusted, out.map)
        }
    };
    write_lab_png(&args.out, &adjusted)?;
    match map {
        Some(map) => {
            let png_path = args.map_out.clone().unwrap_or_else(|| default_map_path(&args.out));
            std::fs::write(&png_path, encode_indexed_png(&map)?)
                .with_context(|| format!("writing {}", png_path.display()))?;
            let json_path = png_path.with_extension("json");
            std::fs::write(&json_path, serde_json::to_string(&RleMap::encode(&map))?)
                .with_context(|| format!("writing {}", json_path.display()))?;
        }
        None => log::warn!("variant {} produces no adjustment map; no sidecar written", model.variant()),
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
            SyntheticSpec::from_toml_str(&text).with_context(|| format!("parsing spec {}", path.display()))?
        }
        None => SyntheticSpec::two_presets(),
    };
    if let Some(f) = args.corruption {
        spec.boundary_corruption = f;
    }
    let data = generate_synthetic_benchmark(&spec, args.count, args.seed)?;
    save_dataset(&args.out, &data)?;
    let spec_path = args.out.join("spec.toml");
    std::fs::write(&spec_path, spec.to_toml_string()).with_context(|| format!("writing {}", spec_path.display()))?;
    log::info!("wrote {} images to {}", data.len(), args.out.display());
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let checkpoint = ModelCheckpoint::load(&args.ckpt)?;
    let state = semadjust_service::AppState::from_checkpoint(&checkpoint)?.with_max_edge(args.max_edge);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let server = semadjust_service::Server::bind_state(state, &args.address, args.port).await?;
        log::info!("listening on {}", server.local_addr()?);
        server.run().await?;
        Ok(())
    })
}
