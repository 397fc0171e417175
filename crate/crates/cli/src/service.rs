//! REST inference service.
//!
//! `POST /predict` takes `{"wav_data": "<base64 WAV>", "method": "all_label"}`
//! and answers `{"label": ..., "scores": {label: probability}}`. `GET /health`
//! and `GET /model` report liveness and the loaded architecture. Every 4xx
//! body is `{"error": code, "message": text}`.

use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use kwsforge::checkpoint::{load_checkpoint, CheckpointError};
use kwsforge::{predict_wav, InferError, Model, Prediction};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

pub const MAX_BODY_BYTES: usize = 1 << 20;
pub const DEFAULT_PORT: u16 = 8000;
pub const DEFAULT_BIND: &str = "127.0.0.1";
pub const CHECKPOINT_ENV: &str = "KWS_CHECKPOINT";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot load checkpoint {path}: {source}")]
    CorruptCheckpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Deserialize)]
pub struct PredictRequest {
    pub wav_data: String,
    #[serde(default = "default_method")]
    pub method: String,
}

fn default_method() -> String {
    "all_label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub label: String,
    /// Label to probability, in label order.
    pub scores: Map<String, Value>,
}

impl PredictResponse {
    pub fn from_prediction(p: &Prediction, labels: &[String]) -> Self {
        let scores = labels.iter().cloned().zip(p.scores.iter().map(|&s| json!(s))).collect();
        Self {
            label: p.label.clone(),
            scores,
        }
    }
}

/// Shared, read-only service state.
#[derive(Debug)]
pub struct AppState {
    pub model: Model,
    pub labels: Vec<String>,
}

impl AppState {
    pub fn new(model: Model) -> Self {
        let labels = model.labels();
        Self { model, labels }
    }

    pub fn load(path: &Path) -> Result<Self, ServeError> {
        let ckpt = load_checkpoint(path).map_err(|source| ServeError::CorruptCheckpoint {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(ckpt.model))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.code, "message": self.message })),
        )
            .into_response()
    }
}

pub fn router(state: Arc<AppState>, cors: bool) -> Router {
    let app = Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .route("/model", get(model_info))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    if cors {
        app.layer(CorsLayer::permissive())
    } else {
        app
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "name": state.model.spec().name.as_str(),
        "n_labels": state.model.n_labels(),
        "labels": state.labels,
    }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "method_not_allowed",
        "method not allowed on this endpoint",
    )
}

async fn predict(
    State(state): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let body = body.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(
                e.status(),
                "payload_too_large",
                format!("request body exceeds {MAX_BODY_BYTES} bytes"),
            )
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
        }
    })?;
    let req: PredictRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_json", e.to_string()))?;
    if req.method != "all_label" {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_method",
            format!("method {:?} is not supported; use \"all_label\"", req.method),
        ));
    }
    let wav = base64::engine::general_purpose::STANDARD
        .decode(req.wav_data.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_base64", e.to_string()))?;

    let worker = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || predict_wav(&worker.model, &wav))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    match result {
        Ok(p) => Ok(Json(PredictResponse::from_prediction(&p, &state.labels))),
        Err(InferError::Audio(e)) => Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_wav", e.to_string())),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e.to_string(),
        )),
    }
}

pub async fn bind(bind: &str, port: u16) -> Result<TcpListener, ServeError> {
    let addr = format!("{bind}:{port}");
    TcpListener::bind(&addr)
        .await
        .map_err(|source| ServeError::BindFailure { addr, source })
}

/// Serves until `shutdown` resolves, then drains open connections.
pub async fn serve_on(
    listener: TcpListener,
    state: Arc<AppState>,
    cors: bool,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    axum::serve(listener, router(state, cors))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

/// Ctrl-C, or SIGTERM on Unix.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
