//! Datasets of (input, target) photo pairs, training-time augmentation,
//! sparse pixel sampling and the synthetic preset benchmark.
//!
//! On-disk layout:
//!
//! ```text
//! root/input/<name>.png
//! root/target/<effect>/<name>.png   effect ∈ foreground_pop_out | local_xpro | watercolor | synthetic
//! root/parse/<name>.png             optional 8-bit indexed or grayscale label map
//! ```

mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{lab_to_srgb, srgb_to_lab, Lab, LabImage};
use crate::{Error, Result};

pub use synthetic::{generate_synthetic_benchmark, PresetTransform, SyntheticSpec};

/// Largest rotation magnitude used by [`augment`], in degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    ForegroundPopOut,
    LocalXpro,
    Watercolor,
    Synthetic,
}

impl Effect {
    pub const ALL: [Effect; 4] = [
        Effect::ForegroundPopOut,
        Effect::LocalXpro,
        Effect::Watercolor,
        Effect::Synthetic,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Effect::ForegroundPopOut => "foreground_pop_out",
            Effect::LocalXpro => "local_xpro",
            Effect::Watercolor => "watercolor",
            Effect::Synthetic => "synthetic",
        }
    }

    /// Preset count used for this effect unless configured otherwise.
    pub fn default_presets(self) -> usize {
        match self {
            Effect::LocalXpro => 4,
            _ => 2,
        }
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Effect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Effect::ALL
            .into_iter()
            .find(|e| e.dir_name() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown effect {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentExample {
    /// File stem the example was loaded from (or a generated name).
    pub name: String,
    pub input: LabImage,
    pub target: LabImage,
    /// Per-pixel category, `(height, width)`.
    pub parse_labels: Option<Array2<u16>>,
    pub effect: Effect,
}

impl AdjustmentExample {
    pub fn new(
        name: impl Into<String>,
        input: LabImage,
        target: LabImage,
        parse_labels: Option<Array2<u16>>,
        effect: Effect,
    ) -> Result<Self> {
        let name = name.into();
        if input.shape() != target.shape() {
            return Err(Error::Dataset(format!(
                "{name}: input is {:?} but target is {:?}",
                input.shape(),
                target.shape()
            )));
        }
        if let Some(labels) = &parse_labels {
            if labels.dim() != input.shape() {
                return Err(Error::Dataset(format!(
                    "{name}: parse labels are {:?} but image is {:?}",
                    labels.dim(),
                    input.shape()
                )));
            }
        }
        Ok(Self {
            name,
            input,
            target,
            parse_labels,
            effect,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.input.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelBatch {
    pub coordinates: Vec<(usize, usize)>,
    pub input_colors: Vec<Lab>,
    pub target_colors: Vec<Lab>,
}

pub fn read_lab_png(path: &Path) -> Result<LabImage> {
    let image = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    srgb_to_lab(&image).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_lab_png(path: &Path, image: &LabImage) -> Result<()> {
    lab_to_srgb(image).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_label_png(path: &Path) -> Result<Array2<u16>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, values) = crate::adjustmap::decode_label_png(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(Array2::from_shape_vec((h, w), values).expect("sized by decoder"))
}

pub fn write_label_png(path: &Path, labels: &Array2<u16>) -> Result<()> {
    let (h, w) = labels.dim();
    if let Some(&bad) = labels.iter().find(|&&v| v > 255) {
        return Err(Error::InvalidArgument(format!("label {bad} does not fit an 8-bit PNG")));
    }
    let raw: Vec<u8> = labels.iter().map(|&v| v as u8).collect();
    image::GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("sized")
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads every input paired with each effect's target, ordered by file name
/// then effect.
pub fn load_dataset(root: &Path) -> Result<Vec<AdjustmentExample>> {
    let input_dir = root.join("input");
    if !input_dir.is_dir() {
        if root.is_dir() {
            return Ok(Vec::new());
        }
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let names = png_stems(&input_dir)?;
    if names.is_empty() {
        return Ok(Vec::new());
    }
    let effects: Vec<Effect> = Effect::ALL
        .into_iter()
        .filter(|e| root.join("target").join(e.dir_name()).is_dir())
        .collect();
    if effects.is_empty() {
        return Err(Error::Dataset(format!(
            "{} has inputs but no target/<effect>/ directory",
            root.display()
        )));
    }
    let mut out = Vec::new();
    for name in names {
        let file = format!("{name}.png");
        let input = read_lab_png(&input_dir.join(&file))?;
        let parse_path = root.join("parse").join(&file);
        let parse = if parse_path.is_file() {
            Some(read_label_png(&parse_path)?)
        } else {
            None
        };
        for &effect in &effects {
            let target_path: PathBuf = root.join("target").join(effect.dir_name()).join(&file);
            if !target_path.is_file() {
                return Err(Error::Dataset(format!("missing target {}", target_path.display())));
            }
            let target = read_lab_png(&target_path)?;
            let example = AdjustmentExample::new(name.clone(), input.clone(), target, parse.clone(), effect)
                .map_err(|e| Error::Dataset(format!("{}: {e}", target_path.display())))?;
            out.push(example);
        }
    }
    Ok(out)
}

/// Writes `examples` in the layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, examples: &[AdjustmentExample]) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&root.join("input"))?;
    for ex in examples {
        let file = format!("{}.png", ex.name);
        write_lab_png(&root.join("input").join(&file), &ex.input)?;
        let dir = root.join("target").join(ex.effect.dir_name());
        mkdir(&dir)?;
        write_lab_png(&dir.join(&file), &ex.target)?;
        if let Some(labels) = &ex.parse_labels {
            mkdir(&root.join("parse"))?;
            write_label_png(&root.join("parse").join(&file), labels)?;
        }
    }
    Ok(())
}

/// Random rotation and flip shared by an input, its target and its labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        angle_deg: 0.0,
        flip: false,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            flip: rng.random_bool(0.5),
        }
    }

    /// Source position in the original image for canvas pixel `(r, c)`.
    pub fn source(&self, r: usize, c: usize, height: usize, width: usize) -> (f64, f64) {
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        let sy = cos * dy + sin * dx + cy;
        let mut sx = -sin * dy + cos * dx + cx;
        if self.flip {
            sx = width as f64 - 1.0 - sx;
        }
        (sy, sx)
    }
}

fn sample_bilinear(image: &LabImage, y: f64, x: f64) -> Lab {
    let (h, w) = image.shape();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let mut out = [0.0; 3];
    for (yy, xx, wt) in [
        (y0, x0, (1.0 - ty) * (1.0 - tx)),
        (y0, x1, (1.0 - ty) * tx),
        (y1, x0, ty * (1.0 - tx)),
        (y1, x1, ty * tx),
    ] {
        if wt != 0.0 {
            let p = image.pixel(yy, xx);
            for ch in 0..3 {
                out[ch] += wt * p[ch];
            }
        }
    }
    out
}

/// Applies `params` to every raster of `example` on a canvas of at least
/// `canvas x canvas` (images larger than the canvas keep their size).
/// Uncovered canvas pixels replicate the nearest image border pixel.
pub fn augment_with(example: &AdjustmentExample, params: AugmentParams, canvas: usize) -> AdjustmentExample {
    let (h, w) = example.shape();
    let (ch, cw) = (h.max(canvas), w.max(canvas));
    let mut sources = Vec::with_capacity(ch * cw);
    for r in 0..ch {
        for c in 0..cw {
            sources.push(params.source(r, c, h, w));
        }
    }
    let warp = |image: &LabImage| LabImage::from_fn(ch, cw, |r, c| {
        let (y, x) = sources[r * cw + c];
        sample_bilinear(image, y, x)
    });
    let labels = example.parse_labels.as_ref().map(|labels| {
        Array2::from_shape_fn((ch, cw), |(r, c)| {
            let (y, x) = sources[r * cw + c];
            let yy = y.round().clamp(0.0, (h - 1) as f64) as usize;
            let xx = x.round().clamp(0.0, (w - 1) as f64) as usize;
            labels[[yy, xx]]
        })
    });
    AdjustmentExample {
        name: example.name.clone(),
        input: warp(&example.input),
        target: warp(&example.target),
        parse_labels: labels,
        effect: example.effect,
    }
}

/// Rotation uniform in ±10°, horizontal flip with probability ½, both drawn from `seed`.
pub fn augment(example: &AdjustmentExample, seed: u64, canvas: usize) -> AdjustmentExample {
    augment_with(example, AugmentParams::sample(seed), canvas)
}

/// `count` distinct pixels drawn uniformly without replacement.
pub fn sample_sparse_pixels(example: &AdjustmentExample, count: usize, seed: u64) -> Result<PixelBatch> {
    let (h, w) = example.shape();
    let total = h * w;
    if count > total {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} pixels from a {h}x{w} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coordinates: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, total, count)
        .into_iter()
        .map(|i| (i / w, i % w))
        .collect();
    Ok(PixelBatch {
        input_colors: coordinates.iter().map(|&(r, c)| example.input.pixel(r, c)).collect(),
        target_colors: coordinates.iter().map(|&(r, c)| example.target.pixel(r, c)).collect(),
        coordinates,
    })
}
