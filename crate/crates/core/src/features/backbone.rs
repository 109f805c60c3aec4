use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};

use super::BackboneConfig;
use crate::impl_parameterized;
use crate::nn::{Conv2d, Conv2dCache, Parameterized};
use crate::{Error, Result};

/// Stride-2 downsampling convolution followed by a residual 3x3 convolution:
/// `h = relu(down(x)); out = relu(h + body(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub down: Conv2d,
    pub body: Conv2d,
}

impl_parameterized!(ResidualBlock { down, body });

/// First convolution at input resolution plus a stack of residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub first: Conv2d,
    pub blocks: Vec<ResidualBlock>,
}

impl_parameterized!(Backbone { first, blocks });

pub struct BackboneCache {
    first: Conv2dCache,
    first_out: Array3<f64>,
    blocks: Vec<BlockCache>,
}

struct BlockCache {
    down: Conv2dCache,
    hidden: Array3<f64>,
    body: Conv2dCache,
    out: Array3<f64>,
}

pub struct BackboneOutput {
    pub first_layer: Array3<f64>,
    pub blocks: Vec<Array3<f64>>,
}

fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn mask_by_positive(grad: &mut Array3<f64>, activations: &Array3<f64>) {
    grad.zip_mut_with(activations, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

impl Backbone {
    pub fn init(rng: &mut impl Rng, config: &BackboneConfig) -> Self {
        let first = Conv2d::he(rng, 3, config.first_layer_channels, 3, 1);
        let mut prev = config.first_layer_channels;
        let blocks = config
            .block_channels
            .iter()
            .map(|&ch| {
                let block = ResidualBlock {
                    down: Conv2d::he(rng, prev, ch, 3, 2),
                    // Scaled down so the residual branch starts as a perturbation.
                    body: {
                        let mut c = Conv2d::he(rng, ch, ch, 3, 1);
                        c.weight.mapv_inplace(|w| w * 0.5);
                        c
                    },
                };
                prev = ch;
                block
            })
            .collect();
        Self { first, blocks }
    }

    pub fn zeros(config: &BackboneConfig) -> Self {
        let mut b = Self::init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0), config);
        b.zero_params();
        b
    }

    /// Overwrites parameters from a tensor container whose names start with
    /// `backbone.`; every backbone tensor must be present with a matching shape.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<()> {
        let tensors = crate::checkpoint::read_tensor_file(path)?;
        for param in self.params_mut() {
            let name = format!("backbone.{}", param.name);
            let (shape, data) = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
            if *shape != param.shape {
                return Err(Error::Shape(format!(
                    "{name}: pretrained shape {shape:?}, model expects {:?}",
                    param.shape
                )));
            }
            param.data.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn first_layer(&self, input: &Array3<f64>) -> Array3<f64> {
        let (mut out, _) = self.first.forward(input);
        relu_inplace(&mut out);
        out
    }

    pub fn forward(&self, input: &Array3<f64>) -> (BackboneOutput, BackboneCache) {
        let (mut first_out, first_cache) = self.first.forward(input);
        relu_inplace(&mut first_out);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let prev = outputs.last().unwrap_or(&first_out);
            let (mut hidden, down) = block.down.forward(prev);
            relu_inplace(&mut hidden);
            let (mut out, body) = block.body.forward(&hidden);
            out += &hidden;
            relu_inplace(&mut out);
            outputs.push(out.clone());
            caches.push(BlockCache {
                down,
                hidden,
                body,
                out,
            });
        }
        (
            BackboneOutput {
                first_layer: first_out.clone(),
                blocks: outputs,
            },
            BackboneCache {
                first: first_cache,
                first_out,
                blocks: caches,
            },
        )
    }

    /// Backward from gradients on the first-layer map and on each block output.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        mut grad_first: Array3<f64>,
        mut grad_blocks: Vec<Array3<f64>>,
        grad: &mut Backbone,
    ) {
        for i in (0..self.blocks.len()).rev() {
            let block = &self.blocks[i];
            let bc = &cache.blocks[i];
            let mut g = std::mem::take(&mut grad_blocks[i]);
            mask_by_positive(&mut g, &bc.out);
            let mut g_hidden = block.body.backward(&bc.body, &g, &mut grad.blocks[i].body);
            g_hidden += &g;
            mask_by_positive(&mut g_hidden, &bc.hidden);
            let g_prev = block.down.backward(&bc.down, &g_hidden, &mut grad.blocks[i].down);
            if i == 0 {
                grad_first += &g_prev;
            } else {
                grad_blocks[i - 1] += &g_prev;
            }
        }
        mask_by_positive(&mut grad_first, &cache.first_out);
        self.first.backward(&cache.first, &grad_first, &mut grad.first);
    }
}
