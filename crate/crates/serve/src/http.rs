use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use crate::engine::Engine;
use crate::session::SessionStore;
use crate::ServeError;

pub struct AppState {
    pub engine: Engine,
    pub sessions: SessionStore,
}

impl AppState {
    pub fn new(engine: Engine) -> Arc<Self> {
        Arc::new(Self {
            engine,
            sessions: SessionStore::default(),
        })
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServeError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServeError::Model(_) | ServeError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn default_k() -> usize {
    10
}

#[derive(Deserialize)]
struct ConverseRequest {
    session_id: String,
    utterance: String,
    #[serde(default = "default_k")]
    k: usize,
}

#[derive(Deserialize)]
struct ResetRequest {
    session_id: String,
}

#[derive(Deserialize)]
struct ItemsQuery {
    limit: Option<usize>,
}

async fn converse(State(app): State<Arc<AppState>>, Json(req): Json<ConverseRequest>) -> Result<Json<Value>, ServeError> {
    if req.utterance.trim().is_empty() {
        return Err(ServeError::BadRequest("utterance is empty".into()));
    }
    let slot = app.sessions.get_or_create(&req.session_id);
    let mut session = slot.lock_owned().await;
    let worker = app.clone();
    let reply = tokio::task::spawn_blocking(move || worker.engine.respond(&mut session, &req.utterance, req.k))
        .await
        .map_err(|e| ServeError::Internal(e.to_string()))??;
    Ok(Json(json!({
        "session_id": req.session_id,
        "response": reply.response,
        "recommendations": reply.recommendations,
        "turn": reply.turn,
    })))
}

async fn reset(State(app): State<Arc<AppState>>, Json(req): Json<ResetRequest>) -> Json<Value> {
    app.sessions.remove(&req.session_id);
    Json(json!({ "ok": true }))
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "checkpoint": app.engine.checkpoint(),
        "items": app.engine.items().len(),
    }))
}

async fn items(State(app): State<Arc<AppState>>, Query(q): Query<ItemsQuery>) -> Json<Value> {
    let all = app.engine.items();
    let n = q.limit.unwrap_or(all.len()).min(all.len());
    let items: Vec<Value> = all[..n]
        .iter()
        .map(|(id, name)| json!({ "item_id": id, "name": name }))
        .collect();
    Json(json!({ "items": items }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/api/converse", post(converse))
        .route("/api/reset", post(reset))
        .route("/api/health", get(health))
        .route("/api/items", get(items))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, checkpoint = state.engine.checkpoint(), "serving");
    axum::serve(listener, router(state)).await
}
