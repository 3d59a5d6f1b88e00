//! JSON/multipart HTTP API over [`JobService`].
//!
//! | route | |
//! |---|---|
//! | `POST /v1/jobs` | multipart `image`, `mask`, optional `config`; 202 `{job_id, status}` |
//! | `GET /v1/jobs/{id}` | job record |
//! | `GET /v1/jobs/{id}/result` | `image/png`; 409 until done |
//! | `GET /v1/jobs/{id}/curves` | JSON lines; 409 until done |
//! | `DELETE /v1/jobs/{id}` | 204 for queued jobs, 409 otherwise |

use std::sync::Arc;

use attnerase_core::orchestrator::RemovalConfig;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use crate::error::ServiceError;
use crate::jobs::{CancelOutcome, JobService, JobStatus, Lookup};

pub const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

pub fn router(service: Arc<JobService>) -> Router {
    Router::new()
        .route("/v1/jobs", post(submit))
        .route("/v1/jobs/{id}", get(status).delete(cancel))
        .route("/v1/jobs/{id}/result", get(result))
        .route("/v1/jobs/{id}/curves", get(curves))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(service)
}

fn error(code: StatusCode, message: impl Into<String>) -> Response {
    (code, Json(json!({ "error": message.into() }))).into_response()
}

fn from_service_error(e: ServiceError) -> Response {
    match e {
        ServiceError::Io { .. } => {
            tracing::error!(error = %e, "storage failure");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
        other => error(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
    }
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown job `{id}`"))
}

fn not_ready(id: &str, status: JobStatus) -> Response {
    let status = serde_json::to_value(status).unwrap_or_default();
    (
        StatusCode::CONFLICT,
        Json(json!({ "error": format!("job `{id}` is not done"), "status": status })),
    )
        .into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Response> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn submit(State(service): State<Arc<JobService>>, mut form: Multipart) -> Response {
    let (mut image, mut mask, mut config) = (None, None, None);
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("multipart: {e}")),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b,
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("multipart: {e}")),
        };
        match name.as_str() {
            "image" => image = Some(bytes),
            "mask" => mask = Some(bytes),
            "config" => config = Some(bytes),
            other => {
                return error(StatusCode::UNPROCESSABLE_ENTITY, format!("unexpected field `{other}`"))
            }
        }
    }
    let (Some(image), Some(mask)) = (image, mask) else {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "both `image` and `mask` are required");
    };
    let config = match config {
        None => RemovalConfig::default(),
        Some(b) => match std::str::from_utf8(&b)
            .map_err(|e| e.to_string())
            .and_then(|s| RemovalConfig::from_json(s).map_err(|e| e.to_string()))
        {
            Ok(c) => c,
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e),
        },
    };
    let outcome = blocking(move || service.submit(&image, &mask, &config)).await;
    match outcome {
        Err(resp) => resp,
        Ok(Err(e)) => from_service_error(e),
        Ok(Ok(rec)) => (
            StatusCode::ACCEPTED,
            Json(json!({ "job_id": rec.job_id, "status": rec.status })),
        )
            .into_response(),
    }
}

async fn status(State(service): State<Arc<JobService>>, Path(id): Path<String>) -> Response {
    match service.get(&id) {
        Ok(Some(rec)) => Json(rec).into_response(),
        Ok(None) => not_found(&id),
        Err(e) => from_service_error(e),
    }
}

fn file_response(id: &str, lookup: Result<Lookup<Vec<u8>>, ServiceError>, content_type: &str) -> Response {
    match lookup {
        Ok(Lookup::Ready(bytes)) => ([(header::CONTENT_TYPE, content_type.to_string())], bytes).into_response(),
        Ok(Lookup::NotReady(s)) => not_ready(id, s),
        Ok(Lookup::NotFound) => not_found(id),
        Err(e) => from_service_error(e),
    }
}

async fn result(State(service): State<Arc<JobService>>, Path(id): Path<String>) -> Response {
    file_response(&id, service.result(&id), "image/png")
}

async fn curves(State(service): State<Arc<JobService>>, Path(id): Path<String>) -> Response {
    file_response(&id, service.curves(&id), "application/x-ndjson")
}

async fn cancel(State(service): State<Arc<JobService>>, Path(id): Path<String>) -> Response {
    match service.cancel(&id) {
        Ok(CancelOutcome::Deleted) => StatusCode::NO_CONTENT.into_response(),
        Ok(CancelOutcome::NotFound) => not_found(&id),
        Ok(CancelOutcome::Conflict(s)) => {
            let status = serde_json::to_value(s).unwrap_or_default();
            (
                StatusCode::CONFLICT,
                Json(json!({ "error": format!("job `{id}` has already started"), "status": status })),
            )
                .into_response()
        }
        Err(e) => from_service_error(e),
    }
}

/// Serves until ctrl-c, then drains the workers.
pub async fn serve(service: Arc<JobService>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, data = %service.store().root().display(), "listening");
    axum::serve(listener, router(Arc::clone(&service)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    let svc = Arc::clone(&service);
    let _ = tokio::task::spawn_blocking(move || svc.shutdown()).await;
    Ok(())
}
