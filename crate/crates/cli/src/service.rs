//! HTTP annotation service.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dyadic_core::annotation::{AnnotationStore, Submission, SubmitError};
use serde::Deserialize;
use serde_json::json;

pub const PORT_ENV: &str = "DYADIC_PORT";
pub const DEFAULT_PORT: u16 = 8080;

pub type SharedStore = Arc<Mutex<AnnotationStore>>;

#[derive(Deserialize)]
struct NextQuery {
    rater: Option<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

async fn next_group(State(store): State<SharedStore>, Query(q): Query<NextQuery>) -> Response {
    let Some(rater) = q.rater.filter(|r| !r.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing rater");
    };
    let mut store = store.lock().expect("store lock");
    match store.next_for(&rater) {
        Some(payload) => Json(payload).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn submit(State(store): State<SharedStore>, Path(group_id): Path<String>, Json(sub): Json<Submission>) -> Response {
    let mut store = store.lock().expect("store lock");
    match store.submit(&group_id, &sub, now_secs()) {
        Ok(n) => Json(json!({ "group_id": group_id, "accepted": n })).into_response(),
        Err(e) => {
            let message = e.to_string();
            match e {
                SubmitError::UnknownGroup(_) => error(StatusCode::NOT_FOUND, message),
                SubmitError::Invalid { missing, .. } => {
                    (StatusCode::BAD_REQUEST, Json(json!({ "error": message, "missing": missing }))).into_response()
                }
                SubmitError::Duplicate { .. } | SubmitError::NotAssigned { .. } => error(StatusCode::CONFLICT, message),
                SubmitError::Storage(_) => error(StatusCode::INTERNAL_SERVER_ERROR, message),
            }
        }
    }
}

async fn progress(State(store): State<SharedStore>) -> Response {
    Json(store.lock().expect("store lock").progress()).into_response()
}

async fn playback(State(store): State<SharedStore>, Path(key): Path<String>) -> Response {
    let path = store.lock().expect("store lock").playback_path(&key);
    let Some(path) = path else {
        return error(StatusCode::NOT_FOUND, format!("unknown playback {key}"));
    };
    match std::fs::read(&path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, format!("playback {key} unavailable: {e}")),
    }
}

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/api/groups/next", get(next_group))
        .route("/api/groups/:id/ratings", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/playback/:key", get(playback))
        .with_state(store)
}

pub fn port_from_env() -> anyhow::Result<u16> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.parse().map_err(|_| anyhow::anyhow!("{PORT_ENV}={v} is not a port number")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

pub async fn serve(store: AnnotationStore, port: u16) -> anyhow::Result<()> {
    let app = router(Arc::new(Mutex::new(store)));
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
