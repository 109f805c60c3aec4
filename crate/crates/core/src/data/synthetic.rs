//! Synthetic benchmark with known ground-truth presets.
//!
//! Each image is a Voronoi partition whose cells are assigned to presets
//! round-robin. A cell's input appearance is a textured color whose hue is
//! drawn near a preset-specific angle, so the preset is recoverable from
//! context. The target applies the cell's preset as an affine map on Lab plus
//! Gaussian noise. Inputs are quantized through 8-bit sRGB so a dataset
//! written to PNG reloads with identical inputs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AdjustmentExample, Effect};
use crate::colorspace::{lab_to_srgb8, srgb8_to_lab, Lab, LabImage};
use crate::{Error, Result};

/// `target = matrix · input + offset` on Lab values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresetTransform {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl PresetTransform {
    pub const IDENTITY: PresetTransform = PresetTransform {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        offset: [0.0; 3],
    };

    pub fn apply(&self, lab: Lab) -> Lab {
        let mut out = self.offset;
        for (o, row) in out.iter_mut().zip(&self.matrix) {
            *o += row[0] * lab[0] + row[1] * lab[1] + row[2] * lab[2];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub preset_transforms: Vec<PresetTransform>,
    /// Standard deviation of the target noise, in Lab units.
    pub noise_sigma: f64,
    pub height: usize,
    pub width: usize,
    pub min_sites: usize,
    pub max_sites: usize,
    /// Fraction of pixels, taken near preset boundaries, whose target uses a
    /// different preset's transform.
    #[serde(default)]
    pub boundary_corruption: f64,
}

impl SyntheticSpec {
    /// Two distinct presets: a brightening saturation boost and a darkening
    /// desaturation with a warm shift.
    pub fn two_presets() -> Self {
        Self {
            k: 2,
            preset_transforms: vec![
                PresetTransform {
                    matrix: [[1.1, 0.0, 0.0], [0.0, 1.3, 0.0], [0.0, 0.0, 1.3]],
                    offset: [4.0, 3.0, 5.0],
                },
                PresetTransform {
                    matrix: [[0.85, 0.0, 0.0], [0.0, 0.5, 0.1], [0.0, 0.0, 0.5]],
                    offset: [-4.0, -6.0, 8.0],
                },
            ],
            noise_sigma: 0.5,
            height: 64,
            width: 64,
            min_sites: 3,
            max_sites: 8,
            boundary_corruption: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > 255 {
            return Err(Error::InvalidArgument(format!("K = {} outside 1..=255", self.k)));
        }
        if self.preset_transforms.len() != self.k {
            return Err(Error::InvalidArgument(format!(
                "{} transforms for K = {}",
                self.preset_transforms.len(),
                self.k
            )));
        }
        let finite = self
            .preset_transforms
            .iter()
            .all(|t| t.matrix.iter().flatten().chain(&t.offset).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument("preset transforms must be finite".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument("noise_sigma must be finite and nonnegative".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        if self.min_sites == 0 || self.min_sites > self.max_sites {
            return Err(Error::InvalidArgument("need 1 <= min_sites <= max_sites".into()));
        }
        if !(0.0..=0.25).contains(&self.boundary_corruption) {
            return Err(Error::InvalidArgument("boundary_corruption must lie in [0, 0.25]".into()));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

struct Site {
    row: f64,
    col: f64,
    preset: usize,
    base: Lab,
    freq: (f64, f64),
    phase: f64,
}

fn nearest(sites: &[Site], r: f64, c: f64) -> (usize, f64) {
    sites
        .iter()
        .enumerate()
        .map(|(i, s)| (i, (s.row - r).powi(2) + (s.col - c).powi(2)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one site")
}

/// `n_images` examples with the region layout kept as `parse_labels`.
pub fn generate_synthetic_benchmark(spec: &SyntheticSpec, n_images: usize, seed: u64) -> Result<Vec<AdjustmentExample>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            generate_one(spec, &mut rng, format!("synthetic_{i:04}"))
        })
        .collect()
}

fn generate_one(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, name: String) -> Result<AdjustmentExample> {
    let (h, w, k) = (spec.height, spec.width, spec.k);
    let n_sites = rng.random_range(spec.min_sites..=spec.max_sites).max(k);
    let sites: Vec<Site> = (0..n_sites)
        .map(|i| {
            let preset = i % k;
            let hue = std::f64::consts::TAU * preset as f64 / k as f64 + rng.random_range(-0.35..0.35);
            let chroma = rng.random_range(18.0..35.0);
            Site {
                row: rng.random_range(0.0..h as f64),
                col: rng.random_range(0.0..w as f64),
                preset,
                base: [rng.random_range(35.0..75.0), chroma * hue.cos(), chroma * hue.sin()],
                freq: (rng.random_range(0.15..0.6), rng.random_range(0.15..0.6)),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    let pixel_noise = Normal::new(0.0, 1.0).expect("valid");
    let target_noise = Normal::new(0.0, spec.noise_sigma).expect("validated");
    let mut layout = Array2::<u16>::zeros((h, w));
    let mut margins = Vec::with_capacity(h * w);
    let mut input = LabImage::filled(h, w, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            let (rf, cf) = (r as f64 + 0.5, c as f64 + 0.5);
            let (idx, d_own) = nearest(&sites, rf, cf);
            let site = &sites[idx];
            layout[[r, c]] = site.preset as u16;
            let d_other = sites
                .iter()
                .filter(|s| s.preset != site.preset)
                .map(|s| (s.row - rf).powi(2) + (s.col - cf).powi(2))
                .fold(f64::INFINITY, f64::min);
            margins.push(d_other.sqrt() - d_own.sqrt());
            let wave = (site.freq.0 * rf + site.phase).sin() * (site.freq.1 * cf).cos();
            let raw = [
                (site.base[0] + 6.0 * wave + pixel_noise.sample(rng)).clamp(0.0, 100.0),
                site.base[1] + 3.0 * wave + pixel_noise.sample(rng),
                site.base[2] - 3.0 * wave + pixel_noise.sample(rng),
            ];
            input.set_pixel(r, c, srgb8_to_lab(lab_to_srgb8(raw)));
        }
    }

    let mut applied = layout.clone();
    if spec.boundary_corruption > 0.0 && k > 1 {
        let total = h * w;
        let corrupt = (spec.boundary_corruption * total as f64).round() as usize;
        let band = (4 * corrupt).min(total);
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]).then(a.cmp(&b)));
        let chosen = rand::seq::index::sample(rng, band, corrupt.min(band));
        for j in chosen {
            let p = order[j];
            let (r, c) = (p / w, p % w);
            applied[[r, c]] = ((layout[[r, c]] as usize + 1) % k) as u16;
        }
    }

    let target = LabImage::from_fn(h, w, |r, c| {
        let t = spec.preset_transforms[applied[[r, c]] as usize].apply(input.pixel(r, c));
        [
            t[0] + target_noise.sample(rng),
            t[1] + target_noise.sample(rng),
            t[2] + target_noise.sample(rng),
        ]
    });
    AdjustmentExample::new(name, input, target, Some(layout), Effect::Synthetic)
}
