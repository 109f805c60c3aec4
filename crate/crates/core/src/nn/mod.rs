//! Minimal layer kit with explicit forward/backward passes in `f64`.

mod adam;
mod conv;
mod linear;
mod params;

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, Conv2dCache};
pub use linear::Linear;
pub use params::{ParamView, ParamViewMut, Parameterized};
#[doc(hidden)]
pub use params::join as join_name;

use ndarray::{Array1, Array2};
use rand::Rng;

/// Symmetric uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// He-style uniform initialization for layers followed by ReLU.
pub fn he_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

pub(crate) fn tanh_grad_from_output(y: f64) -> f64 {
    1.0 - y * y
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) fn sum_rows(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(ndarray::Axis(0))
}
