//! HTTP inference service: `POST /translate`, `GET /health`, `GET /models`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_generator, Manifest};
use crate::error::{Error, Result};
use crate::generator::{check_gamma, GeneratorState};
use crate::types::{LatentMap, TensorImage};

pub const DEFAULT_MAX_REQUEST_BYTES: usize = 4 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslateRequest {
    /// Base64-encoded PNG.
    pub image: String,
    /// Target domain id.
    pub domain: String,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: Option<String>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub image: String,
    pub latency_ms: f64,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub config_hash: String,
    pub domains: Vec<String>,
    pub pretrained: bool,
    pub adapted: bool,
}

#[derive(Debug)]
pub struct LoadedModel {
    pub manifest: Manifest,
    pub state: GeneratorState,
}

impl LoadedModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let (state, _, manifest) = load_generator(dir)?;
        Ok(LoadedModel { manifest, state })
    }

    fn info(&self) -> ModelInfo {
        ModelInfo {
            id: self.manifest.model_id.clone(),
            config_hash: self.manifest.config_hash.clone(),
            domains: self.state.config.domains.clone(),
            pretrained: self.state.pretrained,
            adapted: self.state.adapter_spec.is_some(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_request_bytes: usize,
    /// Largest accepted image side in pixels.
    pub max_image_side: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_request_bytes: DEFAULT_MAX_REQUEST_BYTES,
            max_image_side: 1024,
        }
    }
}

/// Immutable state shared by all handlers. The first model is the default.
#[derive(Clone, Debug)]
pub struct AppState {
    models: Arc<BTreeMap<String, Arc<LoadedModel>>>,
    default_model: String,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(models: Vec<LoadedModel>, config: ServiceConfig) -> Result<Self> {
        let default_model = models
            .first()
            .ok_or_else(|| Error::Validation("service needs at least one model".into()))?
            .manifest
            .model_id
            .clone();
        let mut map = BTreeMap::new();
        for m in models {
            let id = m.manifest.model_id.clone();
            if map.insert(id.clone(), Arc::new(m)).is_some() {
                return Err(Error::Validation(format!("duplicate model id {id}")));
            }
        }
        Ok(AppState {
            models: Arc::new(map),
            default_model,
            config,
        })
    }

    fn model(&self, id: Option<&str>) -> std::result::Result<Arc<LoadedModel>, ApiError> {
        let id = id.unwrap_or(&self.default_model);
        self.models
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::bad_request(format!("unknown model {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Validation(_)
            | Error::Shape(_)
            | Error::Unknown { .. }
            | Error::Image(_)
            | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_request_bytes;
    Router::new()
        .route("/translate", post(translate))
        .route("/health", get(health))
        .route("/models", get(models))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    let m = &s.models[&s.default_model];
    Json(Health {
        status: "ok".into(),
        model_id: m.manifest.model_id.clone(),
        config_hash: m.manifest.config_hash.clone(),
    })
}

async fn models(State(s): State<AppState>) -> Json<Vec<ModelInfo>> {
    Json(s.models.values().map(|m| m.info()).collect())
}

async fn translate(
    State(s): State<AppState>,
    body: Bytes,
) -> std::result::Result<Json<TranslateResponse>, ApiError> {
    let req: TranslateRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    check_gamma(req.gamma)?;
    let model = s.model(req.model.as_deref())?;
    model.state.domain_index(&req.domain)?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(req.image.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
    let x = TensorImage::from_png_bytes(&png)?;
    let side = s.config.max_image_side;
    if x.height() > side || x.width() > side {
        return Err(ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            message: format!(
                "image {}x{} exceeds the {side}px limit",
                x.height(),
                x.width()
            ),
        });
    }
    x.check_latent_compatible()?;
    let (gamma, seed) = (req.gamma, req.seed);
    let out = tokio::task::spawn_blocking(move || -> Result<(Vec<u8>, f64)> {
        let t = Instant::now();
        let z = LatentMap::seeded_noise(x.height(), x.width(), seed);
        let y = model.state.translate(&x, &z, gamma, &req.domain)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        Ok((y.to_png_bytes()?, ms))
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: format!("inference task failed: {e}"),
    })?;
    let (bytes, latency_ms) = out.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
    })?;
    Ok(Json(TranslateResponse {
        image: base64::engine::general_purpose::STANDARD.encode(bytes),
        latency_ms,
        gamma,
        seed,
    }))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!(
        "listening on {}",
        listener
            .local_addr()
            .map_err(|e| Error::io(addr.to_string(), e))?
    );
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}
