//! HTTP routes.

use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::config::{Backend, ServiceConfig};
use crate::engine::{Engine, QueryError};

#[derive(Debug, Clone, Deserialize)]
pub struct QueryRequest {
    pub definition: String,
    pub lang: String,
    #[serde(default)]
    pub k: Option<i64>,
    #[serde(default)]
    pub backend: Option<Backend>,
}

/// The current engine. Handlers clone the inner `Arc` and work on that
/// snapshot, so a reload never affects a request in flight.
#[derive(Clone)]
pub struct AppState {
    engine: Arc<RwLock<Arc<Engine>>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(engine: Engine, config: ServiceConfig) -> Self {
        Self {
            engine: Arc::new(RwLock::new(Arc::new(engine))),
            config: Arc::new(config),
        }
    }

    pub fn engine(&self) -> Arc<Engine> {
        self.engine.read().expect("engine lock").clone()
    }

    pub fn replace(&self, engine: Engine) {
        *self.engine.write().expect("engine lock") = Arc::new(engine);
    }

    /// Loads the configured checkpoints afresh and swaps them in. On error
    /// the old engine stays.
    pub fn reload(&self) -> anyhow::Result<()> {
        let engine = Engine::load(&self.config)?;
        self.replace(engine);
        Ok(())
    }
}

pub fn error_response(status: StatusCode, code: &str) -> Response {
    (status, Json(json!({ "error": code }))).into_response()
}

fn query_error(e: QueryError) -> Response {
    let status = match e {
        QueryError::UnknownLanguage => StatusCode::NOT_FOUND,
        QueryError::Internal(ref msg) => {
            tracing::error!("query failed: {msg}");
            StatusCode::INTERNAL_SERVER_ERROR
        }
        _ => StatusCode::BAD_REQUEST,
    };
    error_response(status, e.code())
}

async fn query(State(state): State<AppState>, body: Result<Json<QueryRequest>, JsonRejection>) -> Response {
    let Ok(Json(req)) = body else {
        return error_response(StatusCode::BAD_REQUEST, "invalid_json");
    };
    let engine = state.engine();
    let result =
        tokio::task::spawn_blocking(move || engine.query(&req.definition, &req.lang, req.k, req.backend)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => query_error(e),
        Err(e) => query_error(QueryError::Internal(e.to_string())),
    }
}

async fn languages(State(state): State<AppState>) -> Response {
    Json(json!({ "languages": state.engine().languages() })).into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    Json(json!({ "status": "ok", "checkpoint_digest": state.engine().checkpoint_digest() })).into_response()
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/api/query", post(query))
        .route("/api/languages", get(languages))
        .route("/api/health", get(health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds and serves until Ctrl-C. On unix, SIGHUP reloads the checkpoints.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let engine = tokio::task::spawn_blocking({
        let cfg = config.clone();
        move || Engine::load(&cfg)
    })
    .await??;
    let bind = config.bind.clone();
    let state = AppState::new(engine, config);
    spawn_reload_on_hangup(state.clone());
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(unix)]
fn spawn_reload_on_hangup(state: AppState) {
    use tokio::signal::unix::{signal, SignalKind};
    tokio::spawn(async move {
        let Ok(mut hup) = signal(SignalKind::hangup()) else {
            return;
        };
        while hup.recv().await.is_some() {
            let s = state.clone();
            match tokio::task::spawn_blocking(move || s.reload()).await {
                Ok(Ok(())) => tracing::info!("reloaded checkpoints"),
                Ok(Err(e)) => tracing::error!("reload failed: {e:#}"),
                Err(e) => tracing::error!("reload task failed: {e}"),
            }
        }
    });
}

#[cfg(not(unix))]
fn spawn_reload_on_hangup(_state: AppState) {}
