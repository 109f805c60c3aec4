use ndarray::{Array1, Array2};
use rand::Rng;

use crate::impl_parameterized;

/// Affine map applied row-wise: `x W + b` with `W: (in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl_parameterized!(Linear { weight, bias });

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn uniform(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Self {
            weight: super::fan_in_uniform(rng, input, output, input),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight);
        out += &self.bias;
        out
    }

    /// Accumulates into `grad` and returns `d x`.
    pub fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(grad_out);
        grad.bias += &super::sum_rows(grad_out);
        grad_out.dot(&self.weight.t())
    }
}
