//! Four-directional spatial RNN over a feature map with GRU cells.
//!
//! Each sweep runs an independent GRU along every row (horizontal sweeps) or
//! column (vertical sweeps). Input-to-hidden pre-activations are normalized
//! per sweep position: for a horizontal sweep at column `j` the statistics of
//! each gate channel are taken over all rows of the image at that column, and
//! symmetrically for vertical sweeps. The four hidden-state maps are
//! concatenated and projected by a 1x1 convolution.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::impl_parameterized;
use crate::nn::{fan_in_uniform, sigmoid, Linear};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

pub const DIRECTIONS: [Direction; 4] = [
    Direction::LeftToRight,
    Direction::RightToLeft,
    Direction::TopToBottom,
    Direction::BottomToTop,
];

impl Direction {
    fn horizontal(self) -> bool {
        matches!(self, Direction::LeftToRight | Direction::RightToLeft)
    }

    /// Flat `(row * width + col)` indices for each line, in sweep order.
    fn lines(self, height: usize, width: usize) -> Vec<Vec<usize>> {
        match self {
            Direction::LeftToRight => (0..height).map(|r| (0..width).map(|c| r * width + c).collect()).collect(),
            Direction::RightToLeft => (0..height)
                .map(|r| (0..width).rev().map(|c| r * width + c).collect())
                .collect(),
            Direction::TopToBottom => (0..width).map(|c| (0..height).map(|r| r * width + c).collect()).collect(),
            Direction::BottomToTop => (0..width)
                .map(|c| (0..height).rev().map(|r| r * width + c).collect())
                .collect(),
        }
    }

    /// Normalization groups: positions sharing a sweep step.
    fn groups(self, height: usize, width: usize) -> Vec<Vec<usize>> {
        if self.horizontal() {
            (0..width).map(|c| (0..height).map(|r| r * width + c).collect()).collect()
        } else {
            (0..height).map(|r| (0..width).map(|c| r * width + c).collect()).collect()
        }
    }
}

/// GRU parameters for one sweep. Gate order in the `3 * hidden` axis: update, reset, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruSweep {
    pub input: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub recurrent: Array2<f64>,
}

impl_parameterized!(GruSweep { input, gamma, beta, recurrent });

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialRnn {
    /// One sweep per entry of [`DIRECTIONS`].
    pub sweeps: Vec<GruSweep>,
    pub projection: Linear,
}

impl_parameterized!(SpatialRnn { sweeps, projection });

struct SweepCache {
    normalized: Array2<f64>,
    inv_std: Array2<f64>,
    update: Array2<f64>,
    reset: Array2<f64>,
    candidate: Array2<f64>,
    recurrent_candidate: Array2<f64>,
    hidden: Array2<f64>,
}

pub struct RnnCache {
    input: Array2<f64>,
    dims: (usize, usize),
    sweeps: Vec<SweepCache>,
    concat: Array2<f64>,
}

impl GruSweep {
    fn init(rng: &mut impl Rng, in_channels: usize, hidden: usize) -> Self {
        Self {
            input: fan_in_uniform(rng, in_channels, 3 * hidden, in_channels),
            gamma: Array1::ones(3 * hidden),
            beta: Array1::zeros(3 * hidden),
            recurrent: fan_in_uniform(rng, hidden, 3 * hidden, hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.recurrent.nrows()
    }

    fn forward(&self, x: &Array2<f64>, dir: Direction, height: usize, width: usize) -> SweepCache {
        let hd = self.hidden();
        let pre = x.dot(&self.input);
        let n = pre.nrows();
        let mut normalized = Array2::zeros((n, 3 * hd));
        let mut inv_std = Array2::zeros((n, 3 * hd));
        for group in dir.groups(height, width) {
            let count = group.len() as f64;
            for ch in 0..3 * hd {
                let mean = group.iter().map(|&i| pre[[i, ch]]).sum::<f64>() / count;
                let var = group.iter().map(|&i| (pre[[i, ch]] - mean).powi(2)).sum::<f64>() / count;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                for &i in &group {
                    normalized[[i, ch]] = (pre[[i, ch]] - mean) * is;
                    inv_std[[i, ch]] = is;
                }
            }
        }
        let mut gates = &normalized * &self.gamma;
        gates += &self.beta;

        let mut update = Array2::zeros((n, hd));
        let mut reset = Array2::zeros((n, hd));
        let mut candidate = Array2::zeros((n, hd));
        let mut recurrent_candidate = Array2::zeros((n, hd));
        let mut hidden = Array2::zeros((n, hd));
        let u = &self.recurrent;
        let mut rec = vec![0.0; 3 * hd];
        for line in dir.lines(height, width) {
            let mut prev: Option<usize> = None;
            for &pos in &line {
                rec.iter_mut().for_each(|v| *v = 0.0);
                if let Some(p) = prev {
                    for j in 0..hd {
                        let hj = hidden[[p, j]];
                        if hj != 0.0 {
                            for (g, &w) in rec.iter_mut().zip(u.row(j)) {
                                *g += hj * w;
                            }
                        }
                    }
                }
                for j in 0..hd {
                    let z = sigmoid(gates[[pos, j]] + rec[j]);
                    let r = sigmoid(gates[[pos, hd + j]] + rec[hd + j]);
                    let cand = (gates[[pos, 2 * hd + j]] + r * rec[2 * hd + j]).tanh();
                    let hp = prev.map_or(0.0, |p| hidden[[p, j]]);
                    update[[pos, j]] = z;
                    reset[[pos, j]] = r;
                    candidate[[pos, j]] = cand;
                    recurrent_candidate[[pos, j]] = rec[2 * hd + j];
                    hidden[[pos, j]] = (1.0 - z) * cand + z * hp;
                }
                prev = Some(pos);
            }
        }
        SweepCache {
            normalized,
            inv_std,
            update,
            reset,
            candidate,
            recurrent_candidate,
            hidden,
        }
    }

    /// Returns `dL/dx` and accumulates parameter gradients.
    fn backward(
        &self,
        x: &Array2<f64>,
        cache: &SweepCache,
        grad_hidden: &Array2<f64>,
        dir: Direction,
        dims: (usize, usize),
        grad: &mut GruSweep,
    ) -> Array2<f64> {
        let (height, width) = dims;
        let hd = self.hidden();
        let n = x.nrows();
        let u = &self.recurrent;
        let mut grad_gates = Array2::zeros((n, 3 * hd));
        let mut dpre = vec![0.0; 3 * hd];
        for line in dir.lines(height, width) {
            let mut carry = vec![0.0; hd];
            for (step, &pos) in line.iter().enumerate().rev() {
                let prev = if step > 0 { Some(line[step - 1]) } else { None };
                for j in 0..hd {
                    let dh = grad_hidden[[pos, j]] + carry[j];
                    let z = cache.update[[pos, j]];
                    let r = cache.reset[[pos, j]];
                    let cand = cache.candidate[[pos, j]];
                    let hp = prev.map_or(0.0, |p| cache.hidden[[p, j]]);
                    let dcand = dh * (1.0 - z);
                    let dz = dh * (hp - cand);
                    carry[j] = dh * z;
                    let dpre_n = dcand * (1.0 - cand * cand);
                    let dr = dpre_n * cache.recurrent_candidate[[pos, j]];
                    dpre[j] = dz * z * (1.0 - z);
                    dpre[hd + j] = dr * r * (1.0 - r);
                    dpre[2 * hd + j] = dpre_n;
                    grad_gates[[pos, j]] = dpre[j];
                    grad_gates[[pos, hd + j]] = dpre[hd + j];
                    grad_gates[[pos, 2 * hd + j]] = dpre_n;
                    // the candidate's recurrent term is gated by r
                    dpre[2 * hd + j] = dpre_n * r;
                }
                if let Some(p) = prev {
                    for i in 0..hd {
                        let hp = cache.hidden[[p, i]];
                        let mut back = 0.0;
                        for (c, &dp) in dpre.iter().enumerate() {
                            grad.recurrent[[i, c]] += hp * dp;
                            back += u[[i, c]] * dp;
                        }
                        carry[i] += back;
                    }
                }
            }
        }

        grad.beta += &grad_gates.sum_axis(Axis(0));
        grad.gamma += &(&grad_gates * &cache.normalized).sum_axis(Axis(0));
        let grad_norm = &grad_gates * &self.gamma;
        let mut grad_pre = Array2::zeros((n, 3 * hd));
        for group in dir.groups(height, width) {
            let count = group.len() as f64;
            for ch in 0..3 * hd {
                let sum_g: f64 = group.iter().map(|&i| grad_norm[[i, ch]]).sum();
                let sum_gx: f64 = group.iter().map(|&i| grad_norm[[i, ch]] * cache.normalized[[i, ch]]).sum();
                for &i in &group {
                    grad_pre[[i, ch]] = cache.inv_std[[i, ch]] / count
                        * (count * grad_norm[[i, ch]] - sum_g - cache.normalized[[i, ch]] * sum_gx);
                }
            }
        }
        grad.input += &x.t().dot(&grad_pre);
        grad_pre.dot(&self.input.t())
    }
}

impl SpatialRnn {
    pub fn init(rng: &mut impl Rng, in_channels: usize, hidden: usize, out_channels: usize) -> Self {
        Self {
            sweeps: DIRECTIONS.iter().map(|_| GruSweep::init(rng, in_channels, hidden)).collect(),
            projection: Linear::uniform(rng, 4 * hidden, out_channels),
        }
    }

    pub fn hidden(&self) -> usize {
        self.sweeps[0].hidden()
    }

    pub fn out_channels(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn forward(&self, map: &Array3<f64>) -> (Array3<f64>, RnnCache) {
        let (h, w, c) = map.dim();
        let input = map
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c))
            .expect("contiguous");
        let hd = self.hidden();
        let mut concat = Array2::zeros((h * w, 4 * hd));
        let mut sweeps = Vec::with_capacity(4);
        for (i, (sweep, &dir)) in self.sweeps.iter().zip(DIRECTIONS.iter()).enumerate() {
            let cache = sweep.forward(&input, dir, h, w);
            concat.slice_mut(s![.., i * hd..(i + 1) * hd]).assign(&cache.hidden);
            sweeps.push(cache);
        }
        let out = self
            .projection
            .forward(&concat)
            .into_shape_with_order((h, w, self.out_channels()))
            .expect("contiguous");
        (
            out,
            RnnCache {
                input,
                dims: (h, w),
                sweeps,
                concat,
            },
        )
    }

    /// Returns the gradient with respect to the input map.
    pub fn backward(&self, cache: &RnnCache, grad_out: &Array3<f64>, grad: &mut SpatialRnn) -> Array3<f64> {
        let (h, w) = cache.dims;
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, self.out_channels()))
            .expect("contiguous");
        let grad_concat = self.projection.backward(&cache.concat, &g, &mut grad.projection);
        let hd = self.hidden();
        let mut grad_input = Array2::zeros(cache.input.raw_dim());
        for (i, &dir) in DIRECTIONS.iter().enumerate() {
            let gh = grad_concat.slice(s![.., i * hd..(i + 1) * hd]).to_owned();
            grad_input += &self.sweeps[i].backward(&cache.input, &cache.sweeps[i], &gh, dir, cache.dims, &mut grad.sweeps[i]);
        }
        grad_input
            .into_shape_with_order((h, w, cache.input.ncols()))
            .expect("contiguous")
    }
}
