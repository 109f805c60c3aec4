//! Sparse hypercolumn readout: bilinear lookup into several feature maps at
//! image-space pixel coordinates, with per-source L2 normalization.
//!
//! Image pixel `r` on a canvas of extent `E` maps to map coordinate
//! `(r + 0.5) * e / E - 0.5` on a map of extent `e` (pixel centers aligned),
//! clamped to `[0, e - 1]`.

use ndarray::{s, Array2, Array3};

use crate::bilinear::{l2_normalize_backward, l2_normalize_into};
use crate::{Error, Result};

/// Four flattened map indices (`row * width + col`) and their interpolation weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

/// Lower neighbor, upper neighbor and the fractional weight of the upper one.
pub fn map_coordinate(pos: usize, canvas_extent: usize, map_extent: usize) -> (usize, usize, f64) {
    let u = (pos as f64 + 0.5) * map_extent as f64 / canvas_extent as f64 - 0.5;
    let u = u.clamp(0.0, (map_extent - 1) as f64);
    let lo = u.floor() as usize;
    let hi = (lo + 1).min(map_extent - 1);
    (lo, hi, u - lo as f64)
}

pub fn tap(row: usize, col: usize, canvas: (usize, usize), map: (usize, usize)) -> Tap {
    let (r0, r1, tr) = map_coordinate(row, canvas.0, map.0);
    let (c0, c1, tc) = map_coordinate(col, canvas.1, map.1);
    let w = map.1;
    Tap {
        index: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
        weight: [(1.0 - tr) * (1.0 - tc), (1.0 - tr) * tc, tr * (1.0 - tc), tr * tc],
    }
}

pub fn check_coordinates(coords: &[(usize, usize)], height: usize, width: usize) -> Result<()> {
    match coords.iter().find(|&&(r, c)| r >= height || c >= width) {
        Some(&(row, col)) => Err(Error::OutOfBounds { row, col, height, width }),
        None => Ok(()),
    }
}

pub struct ReadoutCache {
    taps: Vec<Vec<Tap>>,
    offsets: Vec<usize>,
    dims: Vec<(usize, usize, usize)>,
    normalized: Array2<f64>,
    norms: Array2<f64>,
}

/// Interpolates every source at every coordinate, L2-normalizes each source
/// slice and concatenates them into an `(n, Σ channels)` matrix.
///
/// Coordinates are not bounds-checked here; see [`check_coordinates`].
pub fn readout(sources: &[&Array3<f64>], coords: &[(usize, usize)], canvas: (usize, usize)) -> (Array2<f64>, ReadoutCache) {
    let dims: Vec<_> = sources.iter().map(|m| m.dim()).collect();
    let mut offsets = Vec::with_capacity(sources.len() + 1);
    offsets.push(0);
    for d in &dims {
        offsets.push(offsets.last().unwrap() + d.2);
    }
    let total = *offsets.last().unwrap();
    let n = coords.len();
    let mut normalized = Array2::zeros((n, total));
    let mut norms = Array2::zeros((n, sources.len()));
    let mut taps = Vec::with_capacity(sources.len());
    for (s_idx, map) in sources.iter().enumerate() {
        let (h, w, c) = dims[s_idx];
        let flat = map.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let source_taps: Vec<Tap> = coords.iter().map(|&(r, col)| tap(r, col, canvas, (h, w))).collect();
        let mut raw = vec![0.0; c];
        for (i, t) in source_taps.iter().enumerate() {
            raw.iter_mut().for_each(|v| *v = 0.0);
            for (&idx, &wt) in t.index.iter().zip(&t.weight) {
                if wt != 0.0 {
                    for (v, &m) in raw.iter_mut().zip(&flat[idx * c..(idx + 1) * c]) {
                        *v += wt * m;
                    }
                }
            }
            let out = normalized.slice_mut(s![i, offsets[s_idx]..offsets[s_idx + 1]]);
            norms[[i, s_idx]] = l2_normalize_into(ndarray::ArrayView1::from(&raw), out);
        }
        taps.push(source_taps);
    }
    let cache = ReadoutCache {
        taps,
        offsets,
        dims,
        normalized: normalized.clone(),
        norms,
    };
    (normalized, cache)
}

/// Scatters `dL/d(readout)` back onto each source map.
pub fn readout_backward(cache: &ReadoutCache, grad: &Array2<f64>) -> Vec<Array3<f64>> {
    let mut out = Vec::with_capacity(cache.dims.len());
    for (s_idx, &(h, w, c)) in cache.dims.iter().enumerate() {
        let mut map = vec![0.0; h * w * c];
        let cols = cache.offsets[s_idx]..cache.offsets[s_idx + 1];
        for (i, t) in cache.taps[s_idx].iter().enumerate() {
            let g = grad.slice(s![i, cols.clone()]);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let y = cache.normalized.slice(s![i, cols.clone()]);
            let graw = l2_normalize_backward(y, cache.norms[[i, s_idx]], g);
            for (&idx, &wt) in t.index.iter().zip(&t.weight) {
                if wt != 0.0 {
                    for (m, &gv) in map[idx * c..(idx + 1) * c].iter_mut().zip(graw.iter()) {
                        *m += wt * gv;
                    }
                }
            }
        }
        out.push(Array3::from_shape_vec((h, w, c), map).expect("sized"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_resolution_lookup_is_exact() {
        for pos in 0..7 {
            assert_eq!(map_coordinate(pos, 7, 7), (pos, (pos + 1).min(6), 0.0));
        }
    }

    #[test]
    fn half_resolution_weights() {
        // pixel 3 on an 8-wide canvas sits at 1.25 on a 4-wide map
        assert_eq!(map_coordinate(3, 8, 4), (1, 2, 0.25));
        // pixel 0 falls before the first center and clamps
        assert_eq!(map_coordinate(0, 8, 4), (0, 1, 0.0));
        assert_eq!(map_coordinate(7, 8, 4), (3, 3, 0.0));
    }

    #[test]
    fn constant_map_interpolates_to_the_constant() {
        let map = Array3::from_shape_fn((4, 5, 3), |(_, _, c)| [3.0, -4.0, 0.0][c]);
        let coords: Vec<_> = (0..16).flat_map(|r| (0..20).map(move |c| (r, c))).collect();
        let (out, _) = readout(&[&map], &coords, (16, 20));
        for row in out.rows() {
            assert!((row[0] - 0.6).abs() < 1e-8 && (row[1] + 0.8).abs() < 1e-8 && row[2] == 0.0, "{row}");
        }
    }

    #[test]
    fn slices_have_unit_norm_and_zero_slices_stay_zero() {
        let a = Array3::from_shape_fn((4, 4, 3), |(r, c, k)| (r * 7 + c * 3 + k) as f64 - 9.0);
        let z = Array3::zeros((2, 2, 5));
        let coords = [(0, 0), (3, 5), (7, 7)];
        let (out, _) = readout(&[&a, &z], &coords, (8, 8));
        for row in out.rows() {
            let n1 = row.slice(s![0..3]).dot(&row.slice(s![0..3])).sqrt();
            assert!((n1 - 1.0).abs() < 1e-6);
            assert!(row.slice(s![3..]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn out_of_bounds_coordinates_are_rejected() {
        assert!(check_coordinates(&[(0, 0), (3, 3)], 4, 4).is_ok());
        assert!(matches!(
            check_coordinates(&[(0, 0), (4, 1)], 4, 4),
            Err(Error::OutOfBounds { row: 4, col: 1, .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let a = Array3::from_shape_fn((3, 4, 2), |(r, c, k)| ((r * 8 + c * 2 + k) as f64 * 0.37).sin());
        let b = Array3::from_shape_fn((6, 8, 3), |(r, c, k)| ((r * 24 + c * 3 + k) as f64 * 0.21).cos());
        let coords = [(0, 0), (2, 5), (5, 7), (3, 3)];
        let weights = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.9).sin());
        let loss = |a: &Array3<f64>, b: &Array3<f64>| (&readout(&[a, b], &coords, (6, 8)).0 * &weights).sum();
        let (_, cache) = readout(&[&a, &b], &coords, (6, 8));
        let grads = readout_backward(&cache, &weights);
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 1), (2, 3, 0), (1, 1, 1)] {
            let mut p = a.clone();
            p[idx] += h;
            let mut m = a.clone();
            m[idx] -= h;
            let fd = (loss(&p, &b) - loss(&m, &b)) / (2.0 * h);
            assert!((fd - grads[0][idx]).abs() < 1e-7, "{fd} vs {}", grads[0][idx]);
        }
        for idx in [(0, 0, 2), (2, 5, 1), (5, 7, 0), (3, 3, 1)] {
            let mut p = b.clone();
            p[idx] += h;
            let mut m = b.clone();
            m[idx] -= h;
            let fd = (loss(&a, &p) - loss(&a, &m)) / (2.0 * h);
            assert!((fd - grads[1][idx]).abs() < 1e-7, "{fd} vs {}", grads[1][idx]);
        }
    }
}
