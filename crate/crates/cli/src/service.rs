//! HTTP inference service under `/api/v1`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::multipart::{MultipartError, MultipartRejection};
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fundus_core::gradcam::OverlayConfig;
use fundus_core::model::CLASS_NAMES;
use image::ImageFormat;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::engine::InferenceEngine;

pub const MIB: usize = 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub weights: PathBuf,
    /// Preset name or JSON path; when absent the checkpoint sidecar is used.
    pub model: Option<String>,
    pub max_upload_bytes: usize,
    pub request_timeout_s: u64,
    pub max_concurrent: usize,
    /// `["*"]` allows any origin.
    pub cors_origins: Vec<String>,
    pub overlay: OverlayConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            weights: PathBuf::from("best.mdnw"),
            model: None,
            max_upload_bytes: 16 * MIB,
            request_timeout_s: 30,
            max_concurrent: 8,
            cors_origins: vec!["*".into()],
            overlay: OverlayConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct AppState {
    engine: Arc<InferenceEngine>,
    limiter: Semaphore,
    timeout: Duration,
    started: Instant,
}

/// JSON error body: `{"error": {"code", "message", "id"?}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

static INCIDENT: AtomicU64 = AtomicU64::new(1);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = if self.status.is_server_error() {
            let id = format!("{:016x}", fundus_core::rng::mix(std::process::id().into(), INCIDENT.fetch_add(1, Ordering::Relaxed)));
            log::error!("incident {id}: {}", self.message);
            json!({ "error": { "code": self.code, "message": "internal error", "id": id } })
        } else {
            json!({ "error": { "code": self.code, "message": self.message } })
        };
        (self.status, Json(body)).into_response()
    }
}

fn multipart_error(e: MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", e.body_text())
    } else {
        ApiError::new(StatusCode::BAD_REQUEST, "malformed_multipart", e.body_text())
    }
}

pub fn router(engine: Arc<InferenceEngine>, cfg: &ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        engine,
        limiter: Semaphore::new(cfg.max_concurrent.max(1)),
        timeout: Duration::from_secs(cfg.request_timeout_s.max(1)),
        started: Instant::now(),
    });
    let cors = if cfg.cors_origins.iter().any(|o| o == "*") {
        CorsLayer::new().allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> = cfg.cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
        CorsLayer::new().allow_origin(AllowOrigin::list(origins))
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Router::new()
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/health", get(health))
        .route("/api/v1/model", get(model_info))
        .layer(DefaultBodyLimit::max(cfg.max_upload_bytes))
        .layer(cors)
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_id": st.engine.model_id,
        "uptime_s": st.started.elapsed().as_secs_f64(),
    }))
}

async fn model_info(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let e = &st.engine;
    Json(json!({
        "model_id": e.model_id,
        "config_name": e.model.variant_name,
        "input_size": e.model.input_size,
        "class_names": CLASS_NAMES,
        "weight_checksum": format!("{:08x}", e.checksum),
        "parameter_count": e.model.parameter_count(),
        "gradcam_layer": e.model.gradcam_layer(),
    }))
}

async fn predict(
    State(st): State<Arc<AppState>>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Response, ApiError> {
    let start = Instant::now();
    let mut multipart = multipart.map_err(|e| match e {
        MultipartRejection::InvalidBoundary(_) => ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            "expected a multipart/form-data upload",
        ),
        other => ApiError::new(StatusCode::BAD_REQUEST, "malformed_multipart", other.body_text()),
    })?;
    let mut upload = None;
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        let is_image = field.name() == Some("image");
        let bytes = field.bytes().await.map_err(multipart_error)?;
        if is_image && upload.is_none() {
            upload = Some(bytes);
        }
    }
    let bytes = upload.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_image", "no `image` field"))?;
    match image::guess_format(&bytes) {
        Ok(ImageFormat::Png | ImageFormat::Jpeg) => {}
        Ok(other) => {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "unsupported_image_format",
                format!("{other:?} uploads are not accepted; send PNG or JPEG"),
            ))
        }
        Err(_) => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "undecodable_image", "upload is not a PNG or JPEG image"))
        }
    }

    let _permit = st
        .limiter
        .acquire()
        .await
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting_down", e.to_string()))?;
    let engine = st.engine.clone();
    let task = tokio::task::spawn_blocking(move || {
        let sample = engine
            .preprocess(&bytes)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "undecodable_image", e.to_string()))?;
        engine
            .respond(&sample)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
    });
    let mut response = tokio::time::timeout(st.timeout, task)
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "timeout", "inference timed out"))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    response.elapsed_ms = start.elapsed().as_secs_f64() * 1000.0;
    Ok(Json(response).into_response())
}

/// Load the model (refusing to start if that fails) and serve until ctrl-c.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let mut engine = InferenceEngine::load(&cfg.weights, cfg.model.as_deref())?;
    engine.overlay = cfg.overlay;
    log::info!("loaded {} ({} parameters)", engine.model_id, engine.weights.parameter_count());
    let addr: SocketAddr = cfg.bind.parse()?;
    let app = router(Arc::new(engine), &cfg);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
