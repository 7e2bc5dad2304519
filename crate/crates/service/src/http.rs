use std::net::SocketAddr;
use std::sync::Arc;

use affground_core::dataio::{self, to_canonical};
use affground_core::kb::EdgeEdit;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use crate::{ApiError, GroundRequest, Service, WhatIfRequest};

type Shared = State<Arc<Service>>;

fn canonical(status: StatusCode, bytes: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn ok_json(v: &Value) -> Response {
    canonical(StatusCode::OK, to_canonical(v))
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.kind.status()).expect("valid status code");
        canonical(status, to_canonical(&self.body()))
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("malformed body: {e}")))
}

async fn ground(State(svc): Shared, body: Bytes) -> Result<Response, ApiError> {
    let req: GroundRequest = parse(&body)?;
    Ok(ok_json(&svc.handle_ground(&req)?))
}

async fn whatif(State(svc): Shared, body: Bytes) -> Result<Response, ApiError> {
    let req: WhatIfRequest = parse(&body)?;
    Ok(ok_json(&svc.handle_whatif(&req)?))
}

async fn patch_edges(State(svc): Shared, body: Bytes) -> Result<Response, ApiError> {
    let edits: Vec<EdgeEdit> = parse(&body)?;
    let out = svc.handle_kb_patch(&edits)?;
    Ok(ok_json(&json!({ "old_version": out.old_version, "new_version": out.new_version })))
}

async fn get_kb(State(svc): Shared) -> Response {
    canonical(StatusCode::OK, dataio::save_kb(&svc.current_kb()))
}

async fn get_kb_version(State(svc): Shared) -> Response {
    ok_json(&json!({ "version": svc.kb_version() }))
}

async fn get_audit(State(svc): Shared) -> Response {
    ok_json(&json!({ "entries": svc.audit() }))
}

async fn list_scenes(State(svc): Shared) -> Response {
    ok_json(&json!({ "scenes": svc.scene_ids() }))
}

async fn get_scene(State(svc): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(canonical(StatusCode::OK, dataio::save_scene(svc.scene(&id)?)))
}

async fn health(State(svc): Shared) -> Response {
    ok_json(&json!({ "status": "ok", "kb_version": svc.kb_version(), "scenes": svc.scene_ids().len() }))
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/ground", post(ground))
        .route("/v1/whatif", post(whatif))
        .route("/v1/kb", get(get_kb))
        .route("/v1/kb/version", get(get_kb_version))
        .route("/v1/kb/edges", patch(patch_edges))
        .route("/v1/kb/audit", get(get_audit))
        .route("/v1/scenes", get(list_scenes))
        .route("/v1/scenes/{id}", get(get_scene))
        .route("/v1/health", get(health))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(service)
}

/// Serves until Ctrl-C.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
