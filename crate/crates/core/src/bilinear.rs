//! Low-rank bilinear regression head.
//!
//! A full bilinear map from color and context features to each output channel
//! would need a `(color_dim x context_dim x 3)` tensor. It is never
//! materialized; instead
//!
//! ```text
//! residual = tanh(output_factorᵀ (tanh(color_factorᵀ color + color_bias)
//!                                 ∘ tanh(context_factorᵀ context + context_bias)) + output_bias)
//! output   = input + residual
//! ```
//!
//! with factors of shape `color_dim x rank`, `context_dim x rank` and
//! `rank x 3`. All quantities live in the model's normalized color scale
//! (see [`normalize_lab`]).

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::colorspace::Lab;
use crate::impl_parameterized;
use crate::nn::{fan_in_uniform, sum_rows, tanh_grad_from_output};
use crate::{Error, Result};

/// Per-channel factors taking Lab into the model's internal scale.
pub const LAB_SCALE: [f64; 3] = [1.0 / 100.0, 1.0 / 110.0, 1.0 / 110.0];

/// Guard added to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-8;

pub fn normalize_lab(lab: Lab) -> [f64; 3] {
    [lab[0] * LAB_SCALE[0], lab[1] * LAB_SCALE[1], lab[2] * LAB_SCALE[2]]
}

/// Inverse of [`normalize_lab`]; also maps a normalized residual to Lab units.
pub fn denormalize_lab(v: [f64; 3]) -> Lab {
    [v[0] / LAB_SCALE[0], v[1] / LAB_SCALE[1], v[2] / LAB_SCALE[2]]
}

/// `v / (‖v‖ + ε)` written into `out`; returns the norm.
pub fn l2_normalize_into(v: ArrayView1<f64>, mut out: ndarray::ArrayViewMut1<f64>) -> f64 {
    let norm = v.dot(&v).sqrt();
    let inv = 1.0 / (norm + NORM_EPS);
    out.zip_mut_with(&v, |o, &x| *o = x * inv);
    norm
}

/// Backward of [`l2_normalize_into`]: given the normalized vector `y`, the raw
/// norm and `dL/dy`, return `dL/dv`.
pub fn l2_normalize_backward(y: ArrayView1<f64>, norm: f64, grad_y: ArrayView1<f64>) -> Array1<f64> {
    // y = v / (n + ε);  dy/dv = I / (n + ε) - v vᵀ / (n (n + ε)²)
    let denom = norm + NORM_EPS;
    let mut out = grad_y.mapv(|g| g / denom);
    if norm > 0.0 {
        let proj = y.dot(&grad_y);
        // v (v·g) / (n (n + ε)²) = y (y·g) / n
        out.zip_mut_with(&y, |o, &yi| *o -= proj * yi / norm);
    }
    out
}

/// Color features for one pixel: `[normalized Lab ‖ L2-normalized first-layer vector]`.
pub fn build_color_features(lab: Lab, first_layer: &[f64]) -> Array1<f64> {
    let mut out = Array1::zeros(3 + first_layer.len());
    let scaled = normalize_lab(lab);
    for ch in 0..3 {
        out[ch] = scaled[ch];
    }
    let v = ArrayView1::from(first_layer);
    l2_normalize_into(v, out.slice_mut(ndarray::s![3..]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearHeadParams {
    pub color_factor: Array2<f64>,
    pub context_factor: Array2<f64>,
    pub output_factor: Array2<f64>,
    pub color_bias: Array1<f64>,
    pub context_bias: Array1<f64>,
    pub output_bias: Array1<f64>,
}

impl_parameterized!(BilinearHeadParams { color_factor, context_factor, output_factor, color_bias, context_bias, output_bias });

/// Output channels of the residual (Lab).
pub const OUTPUT_CHANNELS: usize = 3;

/// Context fed to the head for a batch of pixels.
#[derive(Debug, Clone, Copy)]
pub enum ContextInput<'a> {
    /// One `M`-dimensional row per pixel.
    Dense(&'a Array2<f64>),
    /// The same one-hot vector `e_k` for every pixel.
    OneHot(usize),
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadActivations {
    pub color_hidden: Array2<f64>,
    /// `(n, rank)` for dense context, `(1, rank)` for one-hot context.
    pub context_hidden: Array2<f64>,
    pub product: Array2<f64>,
    /// Strictly inside `(-1, 1)`.
    pub residual: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BilinearGradients {
    pub params: BilinearHeadParams,
    pub color: Array2<f64>,
    /// `None` for one-hot context.
    pub context: Option<Array2<f64>>,
    /// Gradient reaching the input color through the skip connection.
    pub input: Array2<f64>,
}

impl BilinearHeadParams {
    pub fn zeros(color_dim: usize, context_dim: usize, rank: usize) -> Self {
        Self {
            color_factor: Array2::zeros((color_dim, rank)),
            context_factor: Array2::zeros((context_dim, rank)),
            output_factor: Array2::zeros((rank, OUTPUT_CHANNELS)),
            color_bias: Array1::zeros(rank),
            context_bias: Array1::zeros(rank),
            output_bias: Array1::zeros(OUTPUT_CHANNELS),
        }
    }

    /// Fan-in uniform factors, zero biases.
    pub fn init(rng: &mut impl Rng, color_dim: usize, context_dim: usize, rank: usize) -> Self {
        Self {
            color_factor: fan_in_uniform(rng, color_dim, rank, color_dim),
            context_factor: fan_in_uniform(rng, context_dim, rank, context_dim),
            output_factor: fan_in_uniform(rng, rank, OUTPUT_CHANNELS, rank),
            ..Self::zeros(color_dim, context_dim, rank)
        }
    }

    pub fn color_dim(&self) -> usize {
        self.color_factor.nrows()
    }

    pub fn context_dim(&self) -> usize {
        self.context_factor.nrows()
    }

    pub fn rank(&self) -> usize {
        self.color_factor.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.rank();
        let ok = self.context_factor.ncols() == d
            && self.output_factor.dim() == (d, OUTPUT_CHANNELS)
            && self.color_bias.len() == d
            && self.context_bias.len() == d
            && self.output_bias.len() == OUTPUT_CHANNELS;
        if !ok {
            return Err(Error::Shape("inconsistent bilinear head dimensions".into()));
        }
        if self.color_factor.iter().chain(self.context_factor.iter()).chain(self.output_factor.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite bilinear head parameter".into()));
        }
        Ok(())
    }

    pub(crate) fn check_inputs(&self, color: &Array2<f64>, context: ContextInput) -> Result<()> {
        if color.ncols() != self.color_dim() {
            return Err(Error::Shape(format!(
                "color features have {} entries, head expects {}",
                color.ncols(),
                self.color_dim()
            )));
        }
        match context {
            ContextInput::Dense(ctx) => {
                if ctx.ncols() != self.context_dim() || ctx.nrows() != color.nrows() {
                    return Err(Error::Shape(format!(
                        "context is {}x{}, head expects {}x{}",
                        ctx.nrows(),
                        ctx.ncols(),
                        color.nrows(),
                        self.context_dim()
                    )));
                }
            }
            ContextInput::OneHot(k) => {
                if k >= self.context_dim() {
                    return Err(Error::PresetIndex {
                        index: k,
                        k: self.context_dim(),
                    });
                }
            }
        }
        Ok(())
    }

    /// `tanh(color · color_factor + color_bias)` for a batch; shared across contexts.
    pub fn color_hidden(&self, color: &Array2<f64>) -> Array2<f64> {
        let mut pre = color.dot(&self.color_factor);
        pre += &self.color_bias;
        pre.mapv_inplace(f64::tanh);
        pre
    }

    fn context_hidden(&self, context: ContextInput) -> Array2<f64> {
        let mut pre = match context {
            ContextInput::Dense(ctx) => ctx.dot(&self.context_factor),
            ContextInput::OneHot(k) => self.context_factor.row(k).to_owned().insert_axis(Axis(0)),
        };
        pre += &self.context_bias;
        pre.mapv_inplace(f64::tanh);
        pre
    }

    /// Batched forward, reusing a precomputed [`Self::color_hidden`].
    pub fn forward_with_hidden(&self, color_hidden: Array2<f64>, context: ContextInput) -> HeadActivations {
        let context_hidden = self.context_hidden(context);
        let product = &color_hidden * &context_hidden;
        let mut residual = product.dot(&self.output_factor);
        residual += &self.output_bias;
        residual.mapv_inplace(f64::tanh);
        HeadActivations {
            color_hidden,
            context_hidden,
            product,
            residual,
        }
    }

    pub fn forward(&self, color: &Array2<f64>, context: ContextInput) -> Result<HeadActivations> {
        self.check_inputs(color, context)?;
        Ok(self.forward_with_hidden(self.color_hidden(color), context))
    }

    /// Backward given the gradient at the residual. Parameter gradients accumulate into `grad`;
    /// returns the gradients for the color and context features, the latter only for dense context.
    pub fn backward(
        &self,
        color: &Array2<f64>,
        context: ContextInput,
        act: &HeadActivations,
        grad_residual: &Array2<f64>,
        grad: &mut BilinearHeadParams,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let (grad_color_hidden, grad_ctx) = self.backward_to_hidden(context, act, grad_residual, grad);
        let grad_color = self.color_hidden_backward(color, &act.color_hidden, &grad_color_hidden, grad);
        (grad_color, grad_ctx)
    }

    /// Backward through everything except the color branch; returns
    /// the gradient at the color hidden layer so callers sharing the color branch across
    /// several contexts can sum it before [`Self::color_hidden_backward`].
    pub fn backward_to_hidden(
        &self,
        context: ContextInput,
        act: &HeadActivations,
        grad_residual: &Array2<f64>,
        grad: &mut BilinearHeadParams,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut grad_pre_out = grad_residual.clone();
        grad_pre_out.zip_mut_with(&act.residual, |g, &y| *g *= tanh_grad_from_output(y));
        grad.output_factor += &act.product.t().dot(&grad_pre_out);
        grad.output_bias += &sum_rows(&grad_pre_out);
        let grad_product = grad_pre_out.dot(&self.output_factor.t());

        let grad_color_hidden = &grad_product * &act.context_hidden;
        let mut grad_context_hidden = &grad_product * &act.color_hidden;
        match context {
            ContextInput::Dense(ctx) => {
                grad_context_hidden.zip_mut_with(&act.context_hidden, |g, &h| *g *= tanh_grad_from_output(h));
                grad.context_factor += &ctx.t().dot(&grad_context_hidden);
                grad.context_bias += &sum_rows(&grad_context_hidden);
                (grad_color_hidden, Some(grad_context_hidden.dot(&self.context_factor.t())))
            }
            ContextInput::OneHot(k) => {
                let mut summed = sum_rows(&grad_context_hidden);
                summed.zip_mut_with(&act.context_hidden.row(0), |g, &h| *g *= tanh_grad_from_output(h));
                let mut row = grad.context_factor.row_mut(k);
                row += &summed;
                grad.context_bias += &summed;
                (grad_color_hidden, None)
            }
        }
    }

    pub fn color_hidden_backward(
        &self,
        color: &Array2<f64>,
        color_hidden: &Array2<f64>,
        grad_color_hidden: &Array2<f64>,
        grad: &mut BilinearHeadParams,
    ) -> Array2<f64> {
        let mut g = grad_color_hidden.clone();
        g.zip_mut_with(color_hidden, |g, &h| *g *= tanh_grad_from_output(h));
        grad.color_factor += &color.t().dot(&g);
        grad.color_bias += &sum_rows(&g);
        g.dot(&self.color_factor.t())
    }
}

/// Single-pixel evaluation: returns the normalized residual and the output
/// Lab color, the input plus the residual in Lab units.
pub fn bilinear_forward(
    color_features: &[f64],
    context: &[f64],
    params: &BilinearHeadParams,
    x: Lab,
) -> Result<([f64; 3], Lab)> {
    let color = Array2::from_shape_vec((1, color_features.len()), color_features.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let ctx = Array2::from_shape_vec((1, context.len()), context.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    let act = params.forward(&color, ContextInput::Dense(&ctx))?;
    let residual = [act.residual[[0, 0]], act.residual[[0, 1]], act.residual[[0, 2]]];
    let delta = denormalize_lab(residual);
    Ok((residual, [x[0] + delta[0], x[1] + delta[1], x[2] + delta[2]]))
}

/// Gradients of a scalar loss given `dL/dy` (normalized units) for each pixel
/// of a dense-context batch.
pub fn bilinear_gradients(
    color: &Array2<f64>,
    context: &Array2<f64>,
    grad_output: &Array2<f64>,
    params: &BilinearHeadParams,
) -> Result<BilinearGradients> {
    if grad_output.dim() != (color.nrows(), OUTPUT_CHANNELS) {
        return Err(Error::Shape("output gradient must be n x 3".into()));
    }
    let ctx = ContextInput::Dense(context);
    let act = params.forward(color, ctx)?;
    let mut grads = BilinearHeadParams::zeros(params.color_dim(), params.context_dim(), params.rank());
    let (color_grad, context_grad) = params.backward(color, ctx, &act, grad_output, &mut grads);
    Ok(BilinearGradients {
        params: grads,
        color: color_grad,
        context: context_grad,
        input: grad_output.clone(),
    })
}
