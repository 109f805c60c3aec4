//! Adjustment map wire formats: palette-indexed PNG (palette index = preset
//! index) and row-major run-length JSON.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use super::AdjustmentMap;
use crate::{Error, Result};

/// Display colors for the first presets; later presets cycle with a hue offset.
const PRESET_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [245, 130, 48],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn preset_color(k: usize) -> [u8; 3] {
    let base = PRESET_COLORS[k % PRESET_COLORS.len()];
    let shift = (k / PRESET_COLORS.len()) as u8;
    base.map(|v| v.wrapping_sub(shift.wrapping_mul(37)))
}

pub fn encode_indexed_png(map: &AdjustmentMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, map.width() as u32, map.height() as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = (0..map.k()).flat_map(preset_color).collect();
    encoder.set_palette(palette);
    let data: Vec<u8> = map.assignments().iter().map(|&a| a as u8).collect();
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    writer
        .finish()
        .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    Ok(out)
}

/// Decodes an 8-bit indexed (or grayscale) PNG whose pixel values are preset
/// indices, validating them against `k`.
pub fn decode_indexed_png(bytes: &[u8], k: usize) -> Result<AdjustmentMap> {
    let labels = decode_label_png(bytes)?;
    AdjustmentMap::new(labels.0, labels.1, k, labels.2)
}

/// Raw `(height, width, values)` of an 8-bit indexed or grayscale PNG.
pub(crate) fn decode_label_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::InvalidArgument(format!("png decode: {e}")))?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    if !matches!(color, png::ColorType::Indexed | png::ColorType::Grayscale) || depth != png::BitDepth::Eight {
        return Err(Error::InvalidArgument(format!(
            "label maps must be 8-bit indexed or grayscale PNGs, got {color:?} at {depth:?}"
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::InvalidArgument("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::InvalidArgument(format!("png decode: {e}")))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut values = Vec::with_capacity(w * h);
    for row in buf.chunks(frame.line_size).take(h) {
        values.extend(row[..w].iter().map(|&v| v as u16));
    }
    Ok((h, w, values))
}

/// `{width, height, K, runs: [[preset_index, run_length], …]}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMap {
    pub width: usize,
    pub height: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub runs: Vec<[u64; 2]>,
}

impl RleMap {
    pub fn encode(map: &AdjustmentMap) -> Self {
        let mut runs: Vec<[u64; 2]> = Vec::new();
        for &a in map.assignments() {
            match runs.last_mut() {
                Some(last) if last[0] == a as u64 => last[1] += 1,
                _ => runs.push([a as u64, 1]),
            }
        }
        Self {
            width: map.width(),
            height: map.height(),
            k: map.k(),
            runs,
        }
    }

    pub fn decode(&self) -> Result<AdjustmentMap> {
        let total: u64 = self.runs.iter().map(|r| r[1]).sum();
        let expected = (self.width * self.height) as u64;
        if total != expected {
            return Err(Error::Shape(format!(
                "runs cover {total} pixels, map is {}x{} = {expected}",
                self.height, self.width
            )));
        }
        let mut assignments = Vec::with_capacity(expected as usize);
        for &[index, len] in &self.runs {
            if index as usize >= self.k {
                return Err(Error::PresetIndex {
                    index: index as usize,
                    k: self.k,
                });
            }
            assignments.extend(std::iter::repeat_n(index as u16, len as usize));
        }
        AdjustmentMap::new(self.height, self.width, self.k, assignments)
    }
}
