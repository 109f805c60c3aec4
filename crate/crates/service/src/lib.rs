//! HTTP inference service: automatic adjustment, map extraction and
//! user-map substitution over one read-only model.
//!
//! Endpoints: `GET /health`, `GET /presets`, `POST /adjust`. Failures answer
//! 400 with `{"error": {"code", "message"}}`.

pub mod wire;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::routing::{get, post};
use axum::{Json, Router};

use semadjust_core::adjustmap::preset_color;
use semadjust_core::checkpoint::ModelCheckpoint;
use semadjust_core::colorspace::{lab_to_srgb8, srgb8_to_lab};
use semadjust_core::model::Model;

pub use wire::{AdjustRequest, AdjustResponse, ApiError, Health, MapPayload, PresetSwatch, Presets, UserMap};

pub const DEFAULT_MAX_EDGE: usize = 1024;

/// Request bodies carry base64 PNGs; a 1024px RGB image fits comfortably.
const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

/// sRGB colors adjusted by each preset for `/presets`.
pub const PROBE_PALETTE: [[u8; 3]; 8] = [
    [32, 32, 32],
    [128, 128, 128],
    [224, 224, 224],
    [200, 60, 50],
    [230, 180, 60],
    [70, 160, 80],
    [60, 110, 200],
    [150, 80, 170],
];

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot load checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        source: semadjust_core::Error,
    },
    #[error("cannot listen on {address}:{port}: {source}")]
    Bind {
        address: String,
        port: u16,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared, immutable per-process state.
#[derive(Clone)]
pub struct AppState {
    model: Arc<Model>,
    step: u64,
    max_edge: usize,
}

impl AppState {
    pub fn new(model: Model, step: u64) -> Self {
        Self {
            model: Arc::new(model),
            step,
            max_edge: DEFAULT_MAX_EDGE,
        }
    }

    pub fn from_checkpoint(checkpoint: &ModelCheckpoint) -> semadjust_core::Result<Self> {
        Ok(Self::new(checkpoint.to_model()?, checkpoint.step))
    }

    pub fn with_max_edge(mut self, max_edge: usize) -> Self {
        self.max_edge = max_edge;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/presets", get(presets))
        .route("/adjust", post(adjust))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// A bound listener with a loaded model. Loading happens before binding, so
/// nothing answers until the model is ready.
pub struct Server {
    listener: tokio::net::TcpListener,
    router: Router,
}

impl Server {
    pub async fn bind(checkpoint: &Path, address: &str, port: u16) -> Result<Self, ServiceError> {
        let state = ModelCheckpoint::load(checkpoint)
            .and_then(|c| AppState::from_checkpoint(&c))
            .map_err(|source| ServiceError::Checkpoint {
                path: checkpoint.to_path_buf(),
                source,
            })?;
        Self::bind_state(state, address, port).await
    }

    pub async fn bind_state(state: AppState, address: &str, port: u16) -> Result<Self, ServiceError> {
        let listener = tokio::net::TcpListener::bind((address, port))
            .await
            .map_err(|source| ServiceError::Bind {
                address: address.to_string(),
                port,
                source,
            })?;
        Ok(Self {
            listener,
            router: app(state),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub async fn run(self) -> Result<(), ServiceError> {
        axum::serve(self.listener, self.router).await?;
        Ok(())
    }
}

/// Loads `checkpoint`, binds `address:port` and serves until the process ends.
pub async fn serve(checkpoint: &Path, address: &str, port: u16) -> Result<(), ServiceError> {
    let server = Server::bind(checkpoint, address, port).await?;
    log::info!("listening on {}", server.local_addr()?);
    server.run().await
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        variant: state.model.variant().to_string(),
        k: state.model.k(),
        step: state.step,
        max_edge: state.max_edge,
    })
}

async fn presets(State(state): State<AppState>) -> Result<Json<Presets>, ApiError> {
    let model = state.model.clone();
    let result = tokio::task::spawn_blocking(move || preset_swatches(&model))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(result))
}

/// Before/after strips of [`PROBE_PALETTE`] under each preset.
pub fn preset_swatches(model: &Model) -> Result<Presets, ApiError> {
    let Some(k) = model.k() else {
        return Ok(Presets {
            k: 0,
            presets: Vec::new(),
        });
    };
    let probe: Vec<_> = PROBE_PALETTE.iter().map(|&c| srgb8_to_lab(c)).collect();
    let before: Vec<[u8; 3]> = probe.iter().map(|&lab| lab_to_srgb8(lab)).collect();
    let presets = (0..k)
        .map(|index| {
            let after = model
                .preset_swatch(&probe, index)
                .map_err(|e| ApiError::internal(e.to_string()))?;
            Ok(PresetSwatch {
                index,
                color: preset_color(index),
                before: before.clone(),
                after: after.into_iter().map(lab_to_srgb8).collect(),
            })
        })
        .collect::<Result<_, ApiError>>()?;
    Ok(Presets { k, presets })
}

async fn adjust(State(state): State<AppState>, body: Bytes) -> Result<Json<AdjustResponse>, ApiError> {
    let request: AdjustRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request("invalid_request", format!("malformed JSON body: {e}")))?;
    let result = tokio::task::spawn_blocking(move || handle_adjust(&state, &request))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(result))
}

/// Synchronous core of `POST /adjust`.
pub fn handle_adjust(state: &AppState, request: &AdjustRequest) -> Result<AdjustResponse, ApiError> {
    let image = wire::decode_image(&request.image, state.max_edge)?;
    let model = &state.model;
    let (h, w) = image.shape();
    match &request.user_map {
        None => {
            let out = model
                .infer(&image)
                .map_err(|e| ApiError::internal(e.to_string()))?;
            Ok(AdjustResponse {
                adjusted: wire::encode_image(&out.adjusted)?,
                map: out.map.as_ref().map(wire::encode_map).transpose()?,
            })
        }
        Some(user_map) => {
            let k = model.k().ok_or_else(|| {
                ApiError::bad_request(
                    "map_unsupported",
                    format!("variant {} has no adjustment map to substitute", model.variant()),
                )
            })?;
            let map = wire::decode_user_map(user_map, k, h, w)?;
            let adjusted = model
                .adjust_with_map(&image, &map)
                .map_err(|e| ApiError::internal(e.to_string()))?;
            Ok(AdjustResponse {
                adjusted: wire::encode_image(&adjusted)?,
                map: Some(wire::encode_map(&map)?),
            })
        }
    }
}
