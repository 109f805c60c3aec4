use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::impl_parameterized;

/// Square-kernel 2-D convolution over `(height, width, channels)` maps with
/// zero "same" padding of `kernel / 2`, lowered to a GEMM via im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(kernel * kernel * in_channels, out_channels)`, row index `(ky * kernel + kx) * in + c`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    kernel: usize,
    stride: usize,
}

impl_parameterized!(Conv2d { weight, bias });

pub struct Conv2dCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel % 2 == 1 && stride >= 1);
        Self {
            weight: Array2::zeros((kernel * kernel * in_channels, out_channels)),
            bias: Array1::zeros(out_channels),
            kernel,
            stride,
        }
    }

    pub fn he(rng: &mut impl Rng, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            weight: super::he_uniform(rng, fan_in, out_channels, fan_in),
            ..Self::zeros(in_channels, out_channels, kernel, stride)
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (height + 2 * pad - self.kernel) / self.stride + 1,
            (width + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, input: &Array3<f64>) -> Array2<f64> {
        let (h, w, c) = input.dim();
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let src = input.as_slice().expect("standard layout");
        let mut cols = Array2::<f64>::zeros((ho * wo, k * k * c));
        let dst = cols.as_slice_mut().expect("fresh array");
        let row_len = k * k * c;
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * self.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = (iy as usize * w + ix as usize) * c;
                        let d = base + (ky * k + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, input: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        let (h, w, c) = input.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(input);
        let mut out = cols.dot(&self.weight);
        out += &self.bias;
        let out = out
            .into_shape_with_order((ho, wo, self.out_channels()))
            .expect("gemm output is contiguous");
        (
            out,
            Conv2dCache {
                cols,
                in_dim: (h, w, c),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &Conv2dCache, grad_out: &Array3<f64>, grad: &mut Conv2d) -> Array3<f64> {
        let (ho, wo) = cache.out_hw;
        let dout = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((ho * wo, self.out_channels()))
            .expect("contiguous");
        grad.weight += &cache.cols.t().dot(&dout);
        grad.bias += &dout.sum_axis(Axis(0));
        let dcols = dout.dot(&self.weight.t());
        self.col2im(&dcols, cache.in_dim)
    }

    fn col2im(&self, dcols: &Array2<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
        let (h, w, c) = in_dim;
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut out = Array3::<f64>::zeros((h, w, c));
        let dst = out.as_slice_mut().expect("fresh array");
        let src = dcols.as_slice().expect("gemm output");
        let row_len = k * k * c;
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * self.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = (iy as usize * w + ix as usize) * c;
                        let s = base + (ky * k + kx) * c;
                        for (o, v) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn direct_conv(conv: &Conv2d, input: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = input.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel() as isize;
        let mut out = Array3::zeros((ho, wo, conv.out_channels()));
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..conv.out_channels() {
                    let mut acc = conv.bias[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * conv.stride()) as isize + ky - k / 2;
                            let ix = (ox * conv.stride()) as isize + kx - k / 2;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += input[[iy as usize, ix as usize, ci]]
                                    * conv.weight[[((ky * k + kx) as usize) * c + ci, o]];
                            }
                        }
                    }
                    out[[oy, ox, o]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_lowering_matches_direct_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let mut conv = Conv2d::he(&mut rng, 3, 4, 3, stride);
            conv.bias = Array1::from_shape_fn(4, |i| i as f64 * 0.1);
            let input = Array3::from_shape_fn((7, 6, 3), |(r, c, ch)| ((r * 13 + c * 7 + ch * 3) % 11) as f64 / 11.0);
            let (fast, _) = conv.forward(&input);
            let slow = direct_conv(&conv, &input);
            assert_eq!(fast.dim(), (if stride == 1 { 7 } else { 4 }, if stride == 1 { 6 } else { 3 }, 4));
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::he(&mut rng, 2, 3, 3, 2);
        let input = Array3::from_shape_fn((5, 5, 2), |(r, c, ch)| (r as f64 - c as f64 * 0.3 + ch as f64).sin());
        let weights = Array3::from_shape_fn((3, 3, 3), |(r, c, ch)| (r + 2 * c + ch) as f64 * 0.1 - 0.4);
        let loss = |conv: &Conv2d, x: &Array3<f64>| (&conv.forward(x).0 * &weights).sum();
        let (_, cache) = conv.forward(&input);
        let mut grad = Conv2d::zeros(2, 3, 3, 2);
        let dx = conv.backward(&cache, &weights, &mut grad);
        let h = 1e-6;
        for idx in [(0, 0, 0), (2, 3, 1), (4, 4, 0)] {
            let mut p = input.clone();
            p[idx] += h;
            let mut m = input.clone();
            m[idx] -= h;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        for idx in [(0, 0), (7, 2), (17, 1)] {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let mut m = conv.clone();
            m.weight[idx] -= h;
            let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * h);
            assert!((fd - grad.weight[idx]).abs() < 1e-7);
        }
    }
}
