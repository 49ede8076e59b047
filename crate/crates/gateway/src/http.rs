//! Axum routes over a shared [`Platform`].

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{ApiError, ApiResult};
use crate::jobs::JobRequest;
use crate::platform::Platform;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    platform: Arc<Platform>,
    token: Option<Arc<str>>,
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

/// Runs a platform call off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn reply<T: Serialize>(status: StatusCode, r: ApiResult<T>) -> Response {
    match r {
        Ok(v) => (status, Json(v)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer ")).is_some_and(|t| t == &**token);
        if !ok {
            let body = serde_json::json!({ "code": "Unauthorized", "message": "missing or wrong bearer token" });
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(req).await
}

async fn onboard(State(s): State<AppState>, body: Bytes) -> Response {
    let r = match parse(&body) {
        Ok(spec) => blocking(move || s.platform.onboard(spec)).await,
        Err(e) => Err(e),
    };
    reply(StatusCode::CREATED, r)
}

async fn list_use_cases(State(s): State<AppState>) -> Response {
    reply(StatusCode::OK, Ok::<_, ApiError>(s.platform.use_case_ids()))
}

async fn use_case(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, blocking(move || s.platform.use_case(&id)).await)
}

async fn decide(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let r = match parse(&body) {
        Ok(req) => blocking(move || s.platform.decide(&id, req)).await,
        Err(e) => Err(e),
    };
    reply(StatusCode::OK, r)
}

async fn observe(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let r = match parse(&body) {
        Ok(req) => blocking(move || s.platform.observe(&id, req)).await,
        Err(e) => Err(e),
    };
    reply(StatusCode::OK, r)
}

async fn submit_job(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let r = match parse::<JobRequest>(&body) {
        Ok(req) => blocking(move || s.platform.submit_job(&id, req)).await,
        Err(e) => Err(e),
    };
    reply(StatusCode::ACCEPTED, r)
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, s.platform.job(&id))
}

async fn candidates(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, blocking(move || s.platform.candidates(&id)).await)
}

async fn deploy(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let r = match parse(&body) {
        Ok(req) => blocking(move || s.platform.deploy(&id, req)).await,
        Err(e) => Err(e),
    };
    reply(StatusCode::OK, r)
}

async fn rollback(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, blocking(move || s.platform.rollback(&id)).await)
}

async fn health(State(s): State<AppState>, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> Response {
    let window = match q.get("window").map(|w| w.parse::<i64>()) {
        None => None,
        Some(Ok(w)) if w > 0 => Some(w),
        Some(_) => return ApiError::bad_request("window must be a positive number of seconds").into_response(),
    };
    reply(StatusCode::OK, blocking(move || s.platform.health(&id, window)).await)
}

async fn audit(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, blocking(move || s.platform.audit_log(&id)).await)
}

/// The `/v1` API. With a token, every request must carry it as a bearer
/// credential.
pub fn router(platform: Arc<Platform>, token: Option<String>) -> Router {
    let state = AppState { platform, token: token.map(Into::into) };
    Router::new()
        .route("/v1/usecases", post(onboard).get(list_use_cases))
        .route("/v1/usecases/{id}", get(use_case))
        .route("/v1/usecases/{id}/decide", post(decide))
        .route("/v1/usecases/{id}/observe", post(observe))
        .route("/v1/usecases/{id}/jobs", post(submit_job))
        .route("/v1/usecases/{id}/candidates", get(candidates))
        .route("/v1/usecases/{id}/deploy", post(deploy))
        .route("/v1/usecases/{id}/rollback", post(rollback))
        .route("/v1/usecases/{id}/health", get(health))
        .route("/v1/usecases/{id}/audit", get(audit))
        .route("/v1/jobs/{id}", get(job))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

pub async fn serve(platform: Arc<Platform>, addr: &str, token: Option<String>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(platform, token)).await?;
    Ok(())
}
