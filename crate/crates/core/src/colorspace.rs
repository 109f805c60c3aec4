//! sRGB ↔ CIELab conversion (D65, 2° observer) and the Lab-space L2 metric.
//!
//! The forward matrix is applied in row-normalized form, i.e. each XYZ row is
//! divided by the white point before use, so reference white lands on
//! exactly `(100, 0, 0)`. Each row is evaluated as `r + w1 (g - r) + w2 (b - r)`
//! which makes neutral grays produce `a = b = 0` exactly.

use std::sync::LazyLock;

use image::{DynamicImage, RgbImage};
use ndarray::Array3;

use crate::{Error, Result};

/// A Lab triple `(L, a, b)`.
pub type Lab = [f64; 3];

/// linear sRGB -> XYZ (D65), IEC 61966-2-1.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// Rows of `SRGB_TO_XYZ` divided by their sums (the D65 white point).
static NORMALIZED_ROWS: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| {
    let mut out = [[0.0; 3]; 3];
    for (row, src) in out.iter_mut().zip(SRGB_TO_XYZ.iter()) {
        let sum: f64 = src.iter().sum();
        for (o, s) in row.iter_mut().zip(src) {
            *o = s / sum;
        }
    }
    out
});

static INVERSE_ROWS: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&NORMALIZED_ROWS));

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let c00 = cof(1, 2, 1, 2);
    let c01 = -cof(1, 2, 0, 2);
    let c02 = cof(1, 2, 0, 1);
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let adj = [
        [c00, -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [c01, cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [c02, -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            inv[r][c] = adj[r][c] / det;
        }
    }
    inv
}

fn decode_transfer(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn encode_transfer(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let cube = f * f * f;
    if cube > EPSILON {
        cube
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Convert one 8-bit sRGB pixel to Lab.
pub fn srgb8_to_lab(rgb: [u8; 3]) -> Lab {
    let lin = rgb.map(|v| decode_transfer(f64::from(v) / 255.0));
    let rows = &*NORMALIZED_ROWS;
    let rel = |row: &[f64; 3]| lin[0] + row[1] * (lin[1] - lin[0]) + row[2] * (lin[2] - lin[0]);
    let fx = lab_f(rel(&rows[0]));
    let fy = lab_f(rel(&rows[1]));
    let fz = lab_f(rel(&rows[2]));
    let l = (116.0 * fy - 16.0).clamp(0.0, 100.0);
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Convert one Lab triple to 8-bit sRGB, clipping out-of-gamut values.
pub fn lab_to_srgb8(lab: Lab) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let rel = [lab_f_inv(fx), lab_f_inv(fy), lab_f_inv(fz)];
    let inv = &*INVERSE_ROWS;
    let mut out = [0u8; 3];
    for (o, row) in out.iter_mut().zip(inv.iter()) {
        let lin = row[0] * rel[0] + row[1] * rel[1] + row[2] * rel[2];
        let v = encode_transfer(lin.max(0.0)) * 255.0;
        *o = if v.is_finite() { v.round().clamp(0.0, 255.0) as u8 } else { 0 };
    }
    out
}

/// A CIELab raster stored row-major as `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    data: Array3<f64>,
}

impl LabImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!("Lab image needs 3 planes, got {}", data.dim().2)));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn filled(height: usize, width: usize, lab: Lab) -> Self {
        let mut data = Array3::zeros((height, width, 3));
        for mut px in data.lanes_mut(ndarray::Axis(2)) {
            px.assign(&ndarray::arr1(&lab));
        }
        Self { data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Lab) -> Self {
        let mut data = Array3::zeros((height, width, 3));
        for r in 0..height {
            for c in 0..width {
                let v = f(r, c);
                for ch in 0..3 {
                    data[[r, c, ch]] = v[ch];
                }
            }
        }
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixel(&self, row: usize, col: usize) -> Lab {
        [self.data[[row, col, 0]], self.data[[row, col, 1]], self.data[[row, col, 2]]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, lab: Lab) {
        for ch in 0..3 {
            self.data[[row, col, ch]] = lab[ch];
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = Lab> + '_ {
        self.data
            .as_slice()
            .expect("standard layout")
            .chunks_exact(3)
            .map(|p| [p[0], p[1], p[2]])
    }
}

/// Convert an 8-bit sRGB raster to Lab. Anything other than 3-channel RGB8 is rejected.
pub fn srgb_to_lab(image: &DynamicImage) -> Result<LabImage> {
    match image {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb_to_lab(rgb)),
        other => Err(Error::ChannelCount(format!("{:?}", other.color()))),
    }
}

pub fn rgb_to_lab(image: &RgbImage) -> LabImage {
    LabImage::from_fn(image.height() as usize, image.width() as usize, |r, c| {
        srgb8_to_lab(image.get_pixel(c as u32, r as u32).0)
    })
}

pub fn lab_to_srgb(image: &LabImage) -> RgbImage {
    let mut out = RgbImage::new(image.width() as u32, image.height() as u32);
    for (c, r, px) in out.enumerate_pixels_mut() {
        px.0 = lab_to_srgb8(image.pixel(r as usize, c as usize));
    }
    out
}

/// Mean over (masked) pixels of the Euclidean norm of per-pixel Lab differences.
///
/// `mask` is row-major with one entry per pixel. An empty selection yields 0.
pub fn lab_l2_distance(a: &LabImage, b: &LabImage, mask: Option<&[bool]>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.height() * a.width() {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} pixels",
                m.len(),
                a.height() * a.width()
            )));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (pa, pb)) in a.pixels().zip(b.pixels()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        total += lab_distance(pa, pb);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn lab_distance(a: Lab, b: Lab) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}
