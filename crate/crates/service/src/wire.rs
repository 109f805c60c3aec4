//! JSON bodies and payload codecs. Images travel as base64 PNG; maps as
//! base64 indexed PNG or run-length JSON.

use std::io::Cursor;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use image::{ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use semadjust_core::adjustmap::{decode_indexed_png, encode_indexed_png, AdjustmentMap, RleMap};
use semadjust_core::colorspace::{lab_to_srgb, rgb_to_lab, LabImage};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjustRequest {
    /// Base64 PNG.
    pub image: String,
    #[serde(default)]
    pub user_map: Option<UserMap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UserMap {
    /// Base64 indexed PNG, palette index = preset index.
    Png(String),
    Rle(RleMap),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPayload {
    /// Base64 indexed PNG.
    pub png: String,
    pub rle: RleMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustResponse {
    /// Base64 PNG.
    pub adjusted: String,
    /// Null for models without an adjustment map.
    pub map: Option<MapPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub variant: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub step: u64,
    pub max_edge: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSwatch {
    pub index: usize,
    /// Overlay color used for this preset in indexed map PNGs.
    pub color: [u8; 3],
    pub before: Vec<[u8; 3]>,
    pub after: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presets {
    #[serde(rename = "K")]
    pub k: usize,
    pub presets: Vec<PresetSwatch>,
}

/// A 4xx/5xx answer with a machine-readable `code`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    /// Offending preset index, for `preset_index_out_of_range`.
    pub index: Option<usize>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
}

impl ApiError {
    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
            index: None,
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
            index: None,
        }
    }

    fn preset_index(index: usize, k: usize) -> Self {
        Self {
            index: Some(index),
            ..Self::bad_request(
                "preset_index_out_of_range",
                format!("map uses preset index {index}, model has K = {k}"),
            )
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: &self.message,
                index: self.index,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

fn base64_bytes(text: &str, what: &str) -> Result<Vec<u8>, ApiError> {
    STANDARD
        .decode(text.trim())
        .map_err(|e| ApiError::bad_request("invalid_base64", format!("{what}: {e}")))
}

/// Decodes a base64 PNG to Lab, rejecting images whose longer edge exceeds
/// `max_edge` before decoding pixels.
pub fn decode_image(text: &str, max_edge: usize) -> Result<LabImage, ApiError> {
    let bytes = base64_bytes(text, "image")?;
    let (w, h) = ImageReader::with_format(Cursor::new(&bytes), ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| ApiError::bad_request("invalid_image", format!("image is not a readable PNG: {e}")))?;
    if w.max(h) as usize > max_edge {
        return Err(ApiError::bad_request(
            "image_too_large",
            format!("image is {w}x{h}; the longer edge may not exceed {max_edge}"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(ApiError::bad_request("invalid_image", "image is empty"));
    }
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| ApiError::bad_request("invalid_image", format!("image is not a readable PNG: {e}")))?;
    Ok(rgb_to_lab(&decoded.to_rgb8()))
}

pub fn encode_image(image: &LabImage) -> Result<String, ApiError> {
    let mut bytes = Vec::new();
    lab_to_srgb(image)
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| ApiError::internal(format!("PNG encoding failed: {e}")))?;
    Ok(STANDARD.encode(bytes))
}

pub fn encode_map(map: &AdjustmentMap) -> Result<MapPayload, ApiError> {
    let png = encode_indexed_png(map).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(MapPayload {
        png: STANDARD.encode(png),
        rle: RleMap::encode(map),
    })
}

/// Decodes a user map against a model with `k` presets and an image of
/// `height x width`.
pub fn decode_user_map(map: &UserMap, k: usize, height: usize, width: usize) -> Result<AdjustmentMap, ApiError> {
    let decoded = match map {
        UserMap::Png(text) => {
            let bytes = base64_bytes(text, "user_map")?;
            decode_indexed_png(&bytes, k).map_err(|e| map_error(e, k))?
        }
        UserMap::Rle(rle) => {
            if let Some(&[index, _]) = rle.runs.iter().find(|r| r[0] as usize >= k) {
                return Err(ApiError::preset_index(index as usize, k));
            }
            if rle.k != k {
                return Err(ApiError::bad_request(
                    "invalid_map",
                    format!("map declares K = {}, model has K = {k}", rle.k),
                ));
            }
            rle.decode().map_err(|e| map_error(e, k))?
        }
    };
    if (decoded.height(), decoded.width()) != (height, width) {
        return Err(ApiError::bad_request(
            "map_dimensions",
            format!(
                "map is {}x{}, image is {height}x{width}",
                decoded.height(),
                decoded.width()
            ),
        ));
    }
    Ok(decoded)
}

fn map_error(e: semadjust_core::Error, k: usize) -> ApiError {
    match e {
        semadjust_core::Error::PresetIndex { index, .. } => ApiError::preset_index(index, k),
        other => ApiError::bad_request("invalid_map", other.to_string()),
    }
}
