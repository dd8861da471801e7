//! Partition worker: serves top-k searches over one loaded index.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ragscope_core::ann::{AnnGraph, IndexError, SearchHit};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::auth::KeySet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub embedding: Vec<f32>,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub hits: Vec<SearchHit>,
    pub partition_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub partition_id: u32,
    pub global_offset: u64,
    pub count: u64,
    pub dim: usize,
    /// `/search` requests received, counted before authentication.
    pub requests: u64,
}

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub default_beam: usize,
    pub token: Option<String>,
    /// Searches running at once; further requests wait.
    pub max_concurrent: usize,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        Self {
            default_beam: crate::config::WORKER_DEFAULT_BEAM,
            token: None,
            max_concurrent: std::thread::available_parallelism().map_or(4, |n| n.get()),
        }
    }
}

pub struct WorkerState {
    graph: OnceLock<Arc<AnnGraph>>,
    default_beam: usize,
    token: Option<KeySet>,
    requests: AtomicU64,
    permits: Semaphore,
}

impl WorkerState {
    /// A worker that answers 503 until [`WorkerState::set_index`] is called.
    pub fn loading(opts: WorkerOptions) -> Arc<Self> {
        Arc::new(Self {
            graph: OnceLock::new(),
            default_beam: opts.default_beam.max(1),
            token: opts.token.map(|t| KeySet::new([t])),
            requests: AtomicU64::new(0),
            permits: Semaphore::new(opts.max_concurrent.max(1)),
        })
    }

    pub fn ready(graph: AnnGraph, opts: WorkerOptions) -> Arc<Self> {
        let state = Self::loading(opts);
        state.set_index(graph);
        state
    }

    /// Installs the index once; later calls are ignored.
    pub fn set_index(&self, graph: AnnGraph) {
        if self.graph.set(Arc::new(graph)).is_err() {
            tracing::warn!("index already loaded; ignoring second load");
        }
    }

    pub fn index(&self) -> Option<&Arc<AnnGraph>> {
        self.graph.get()
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Loads `path` on the blocking pool and installs it into `state`.
pub fn spawn_load(
    state: Arc<WorkerState>,
    path: PathBuf,
) -> tokio::task::JoinHandle<Result<(), IndexError>> {
    tokio::task::spawn_blocking(move || {
        let graph = AnnGraph::load(&path)?;
        tracing::info!(
            path = %path.display(),
            partition = graph.manifest().partition_id,
            count = graph.len(),
            "index loaded"
        );
        state.set_index(graph);
        Ok(())
    })
}

pub fn router(state: Arc<WorkerState>) -> Router {
    let search = Router::new()
        .route("/search", post(handle_search))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route_layer(middleware::from_fn_with_state(state.clone(), count_requests));
    Router::new()
        .route("/health", get(handle_health))
        .merge(search)
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn count_requests(State(state): State<Arc<WorkerState>>, req: Request, next: Next) -> Response {
    state.requests.fetch_add(1, Ordering::SeqCst);
    next.run(req).await
}

async fn require_token(State(state): State<Arc<WorkerState>>, req: Request, next: Next) -> Response {
    if let Some(keys) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.as_bytes().strip_prefix(b"Bearer "));
        if !keys.verify(presented) {
            return error(StatusCode::UNAUTHORIZED, "missing or invalid bearer token");
        }
    }
    next.run(req).await
}

async fn handle_search(State(state): State<Arc<WorkerState>>, body: Bytes) -> Response {
    let Some(graph) = state.index().cloned() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "index is loading");
    };
    let req: SearchRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    if req.embedding.len() != graph.dim() {
        return error(
            StatusCode::BAD_REQUEST,
            format!("embedding has length {}, index dimension is {}", req.embedding.len(), graph.dim()),
        );
    }
    if req.k == 0 {
        return error(StatusCode::BAD_REQUEST, "k must be >= 1");
    }
    if req.beam == Some(0) {
        return error(StatusCode::BAD_REQUEST, "beam must be >= 1");
    }
    let beam = req.beam.unwrap_or(state.default_beam);

    let Ok(_permit) = state.permits.acquire().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "worker shutting down");
    };
    let partition_id = graph.manifest().partition_id;
    let result = tokio::task::spawn_blocking(move || graph.search(&req.embedding, req.k, beam)).await;
    match result {
        Ok(Ok(hits)) => Json(SearchResponse { hits, partition_id }).into_response(),
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("search task failed: {e}")),
    }
}

async fn handle_health(State(state): State<Arc<WorkerState>>) -> Response {
    match state.index() {
        None => error(StatusCode::SERVICE_UNAVAILABLE, "index is loading"),
        Some(graph) => {
            let m = graph.manifest();
            Json(HealthResponse {
                status: "ok".into(),
                partition_id: m.partition_id,
                global_offset: m.global_offset,
                count: m.count,
                dim: graph.dim(),
                requests: state.request_count(),
            })
            .into_response()
        }
    }
}
