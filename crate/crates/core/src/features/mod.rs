//! Context features: residual CNN backbone, four-directional spatial RNN,
//! sparse hypercolumn readout and the linear squeeze to `context_dim`.

mod backbone;
mod hypercolumn;
mod rnn;

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::colorspace::LabImage;
use crate::impl_parameterized;
use crate::nn::Linear;
use crate::{Error, Result};

pub use backbone::{Backbone, BackboneCache, BackboneOutput, ResidualBlock};
pub use hypercolumn::{check_coordinates, map_coordinate, readout, readout_backward, tap, ReadoutCache, Tap};
pub use rnn::{Direction, GruSweep, RnnCache, SpatialRnn, DIRECTIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub profile: Profile,
    pub first_layer_channels: usize,
    /// Output channels of each stride-2 residual block.
    pub block_channels: Vec<usize>,
    /// Hidden units per RNN sweep direction.
    pub rnn_hidden: usize,
    pub rnn_channels: usize,
    pub context_dim: usize,
    pub pretrained: bool,
    /// Tensor container holding `backbone.*` weights; required when `pretrained`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_path: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            first_layer_channels: 8,
            block_channels: vec![16, 32, 64],
            rnn_hidden: 16,
            rnn_channels: 64,
            context_dim: 32,
            pretrained: false,
            pretrained_path: None,
        }
    }

    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            first_layer_channels: 64,
            block_channels: vec![256, 512, 1024],
            rnn_hidden: 256,
            rnn_channels: 1024,
            context_dim: 512,
            pretrained: false,
            pretrained_path: None,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => Self::full(),
            Profile::Toy => Self::toy(),
        }
    }

    /// Total downsampling of the deepest block.
    pub fn downsampling(&self) -> usize {
        1 << self.block_channels.len()
    }

    /// Channels of the concatenated hypercolumn before the squeeze.
    pub fn hypercolumn_dim(&self) -> usize {
        self.block_channels.iter().sum::<usize>() + self.rnn_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::Config(format!(
                "block_channels must be nonempty and positive, got {:?}",
                self.block_channels
            )));
        }
        for (name, v) in [
            ("first_layer_channels", self.first_layer_channels),
            ("rnn_hidden", self.rnn_hidden),
            ("rnn_channels", self.rnn_channels),
            ("context_dim", self.context_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.pretrained && self.pretrained_path.is_none() {
            return Err(Error::Config("pretrained backbone requested without pretrained_path".into()));
        }
        Ok(())
    }
}

/// Feature maps of one image. Maps cover the padded canvas.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    pub image_size: (usize, usize),
    pub canvas_size: (usize, usize),
    pub first_layer: Array3<f64>,
    pub blocks: Vec<Array3<f64>>,
    pub rnn: Array3<f64>,
}

impl FeatureMaps {
    /// Hypercolumn sources in concatenation order: blocks, then the RNN map.
    pub fn sources(&self) -> Vec<&Array3<f64>> {
        self.blocks.iter().chain(std::iter::once(&self.rnn)).collect()
    }

    /// First-layer vector at an image pixel (the first layer runs at full resolution).
    pub fn first_layer_at(&self, row: usize, col: usize) -> Vec<f64> {
        self.first_layer.slice(ndarray::s![row, col, ..]).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    /// One `context_dim` row per requested coordinate.
    pub vectors: Array2<f64>,
}

/// Backbone input: Lab scaled to the model range, replicate-padded at the
/// bottom and right to a multiple of `multiple`.
pub fn backbone_input(image: &LabImage, multiple: usize) -> Array3<f64> {
    let (h, w) = image.shape();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let data = image.data();
    Array3::from_shape_fn((ph, pw, 3), |(r, c, ch)| {
        data[[r.min(h - 1), c.min(w - 1), ch]] * crate::bilinear::LAB_SCALE[ch]
    })
}

/// Backbone, spatial RNN and squeeze as one trainable unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub backbone: Backbone,
    pub rnn: SpatialRnn,
    pub squeeze: Linear,
}

impl_parameterized!(FeatureExtractor { backbone, rnn, squeeze });

pub struct FeatureCache {
    backbone: BackboneCache,
    rnn: RnnCache,
}

pub struct ContextCache {
    readout_input: Array2<f64>,
    readout: ReadoutCache,
}

/// Gradients reaching each feature map.
pub struct MapGradients {
    pub first_layer: Array3<f64>,
    pub blocks: Vec<Array3<f64>>,
    pub rnn: Array3<f64>,
}

impl MapGradients {
    pub fn zeros_like(maps: &FeatureMaps) -> Self {
        Self {
            first_layer: Array3::zeros(maps.first_layer.raw_dim()),
            blocks: maps.blocks.iter().map(|b| Array3::zeros(b.raw_dim())).collect(),
            rnn: Array3::zeros(maps.rnn.raw_dim()),
        }
    }
}

impl FeatureExtractor {
    /// Random initialization; loads pretrained backbone weights when configured.
    pub fn new(rng: &mut impl Rng, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut backbone = Backbone::init(rng, config);
        if config.pretrained {
            let path = config.pretrained_path.as_deref().expect("validated");
            backbone.load_pretrained(path)?;
        }
        let last = *config.block_channels.last().expect("validated");
        let rnn = SpatialRnn::init(rng, last, config.rnn_hidden, config.rnn_channels);
        let squeeze = Linear::uniform(rng, config.hypercolumn_dim(), config.context_dim);
        Ok(Self { backbone, rnn, squeeze })
    }

    pub fn context_dim(&self) -> usize {
        self.squeeze.output_dim()
    }

    pub fn first_layer_channels(&self) -> usize {
        self.backbone.first.out_channels()
    }

    pub fn downsampling(&self) -> usize {
        1 << self.backbone.blocks.len()
    }

    pub fn forward(&self, image: &LabImage) -> (FeatureMaps, FeatureCache) {
        let input = backbone_input(image, self.downsampling());
        let (ph, pw, _) = input.dim();
        let (out, backbone) = self.backbone.forward(&input);
        let (rnn_map, rnn) = self.rnn.forward(out.blocks.last().expect("at least one block"));
        (
            FeatureMaps {
                image_size: image.shape(),
                canvas_size: (ph, pw),
                first_layer: out.first_layer,
                blocks: out.blocks,
                rnn: rnn_map,
            },
            FeatureCache { backbone, rnn },
        )
    }

    /// The first-layer map alone (the full-resolution input to color features).
    pub fn first_layer(&self, image: &LabImage) -> Array3<f64> {
        let input = backbone_input(image, self.downsampling());
        self.backbone.first_layer(&input)
    }

    /// Squeezed hypercolumns at `coords`. Coordinates must lie inside the image.
    pub fn context(&self, maps: &FeatureMaps, coords: &[(usize, usize)]) -> Result<(Array2<f64>, ContextCache)> {
        check_coordinates(coords, maps.image_size.0, maps.image_size.1)?;
        let (readout_input, readout) = readout(&maps.sources(), coords, maps.canvas_size);
        let vectors = self.squeeze.forward(&readout_input);
        Ok((vectors, ContextCache { readout_input, readout }))
    }

    /// Backward from `dL/d(context)`; adds the map gradients into `maps`.
    pub fn context_backward(
        &self,
        cache: &ContextCache,
        grad_context: &Array2<f64>,
        maps: &mut MapGradients,
        grad: &mut FeatureExtractor,
    ) {
        let grad_readout = self.squeeze.backward(&cache.readout_input, grad_context, &mut grad.squeeze);
        let mut sources = readout_backward(&cache.readout, &grad_readout);
        let rnn = sources.pop().expect("rnn source");
        maps.rnn += &rnn;
        for (acc, g) in maps.blocks.iter_mut().zip(sources) {
            *acc += &g;
        }
    }

    pub fn backward(&self, cache: &FeatureCache, maps: MapGradients, grad: &mut FeatureExtractor) {
        let MapGradients {
            first_layer,
            mut blocks,
            rnn,
        } = maps;
        let into_last = self.rnn.backward(&cache.rnn, &rnn, &mut grad.rnn);
        *blocks.last_mut().expect("at least one block") += &into_last;
        self.backbone.backward(&cache.backbone, first_layer, blocks, &mut grad.backbone);
    }
}

/// Feature maps of `image` under a freshly initialized extractor drawn from `seed`.
pub fn backbone_forward(image: &LabImage, config: &BackboneConfig, seed: u64) -> Result<FeatureMaps> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let net = FeatureExtractor::new(&mut rng, config)?;
    Ok(net.forward(image).0)
}

/// Squeezed hypercolumns of `maps` at `coordinates`.
pub fn hypercolumn_at(maps: &FeatureMaps, coordinates: &[(usize, usize)], squeeze: &Linear) -> Result<ContextFeatures> {
    check_coordinates(coordinates, maps.image_size.0, maps.image_size.1)?;
    let expected: usize = maps.sources().iter().map(|m| m.dim().2).sum();
    if squeeze.input_dim() != expected {
        return Err(Error::Shape(format!(
            "squeeze expects {} hypercolumn channels, maps provide {expected}",
            squeeze.input_dim()
        )));
    }
    let (raw, _) = readout(&maps.sources(), coordinates, maps.canvas_size);
    Ok(ContextFeatures {
        vectors: squeeze.forward(&raw),
    })
}
