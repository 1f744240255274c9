//! JSON-over-HTTP front end for [`AnnotationService`].

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AnnotateRequest, AnnotationService};
use crate::error::Error;
use crate::spatial::{ColorLegend, Raster};

#[derive(Debug, Deserialize)]
pub struct RegisterRequest {
    pub lat: f64,
    pub lon: f64,
    /// Base64 of a binary PPM tile.
    pub tile_b64: String,
    pub legend: ColorLegend,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub location_id: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnregisteredLocation(_) => StatusCode::NOT_FOUND,
            Error::InsufficientContext(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::NonFinite { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, r.body_text())
    }
}

type Shared = Arc<AnnotationService>;

async fn register(
    State(svc): State<Shared>,
    body: Result<Json<RegisterRequest>, JsonRejection>,
) -> Result<Json<RegisterResponse>, ApiError> {
    let Json(req) = body?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(req.tile_b64.trim())
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("tile_b64: {e}")))?;
    let tile = Raster::decode_ppm(&bytes)?;
    let location_id = svc.register_location(req.lat, req.lon, &tile, &req.legend)?;
    Ok(Json(RegisterResponse { location_id }))
}

async fn annotate(
    State(svc): State<Shared>,
    body: Result<Json<AnnotateRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    // the per-location lock and model run are synchronous
    let out = tokio::task::spawn_blocking(move || svc.annotate(&req))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out).into_response())
}

async fn model_info(State(svc): State<Shared>) -> Response {
    Json(svc.model_info()).into_response()
}

async fn health(State(svc): State<Shared>) -> Response {
    Json(json!({
        "status": "ok",
        "model_version": svc.snapshot().version,
        "locations": svc.n_locations(),
    }))
    .into_response()
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/v1/locations", post(register))
        .route("/v1/annotate", post(annotate))
        .route("/v1/model/info", get(model_info))
        .route("/v1/health", get(health))
        .with_state(service)
}

/// Serves until the listener fails or the process exits.
pub async fn serve(service: Shared, addr: std::net::SocketAddr) -> crate::error::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on {}", listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?);
    axum::serve(listener, router(service))
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}
