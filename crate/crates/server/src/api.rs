//! Public HTTP API: `/api/query`, `/api/rewrite` and `/api/health`.
//!
//! Every request gets a UUIDv4 request id, echoed in the `x-request-id`
//! header and in every JSON body. Authentication runs before the query
//! handlers, so rejected requests never reach embedding or retrieval.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderName, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use ragscope_core::ann::SearchHit;
use ragscope_core::attention::{DocumentAttentionScore, TokenAttribution};
use ragscope_core::backend::{BackendEcho, BackendError, GenerationParams};
use ragscope_core::context::{RetrievalPlan, SegmentKind, SnippetMethod};
use ragscope_core::embed::EmbedError;
use ragscope_core::pipeline::{Pipeline, PipelineError, StageTimings};
use serde::{Deserialize, Serialize};
use tower_http::compression::CompressionLayer;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::auth::KeySet;

pub const API_KEY_HEADER: &str = "x-api-key";
pub const REQUEST_ID_HEADER: &str = "x-request-id";

/// Per-request defaults and limits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryDefaults {
    pub k: usize,
    pub method: SnippetMethod,
    pub window: usize,
    pub stride: usize,
    /// Default and upper bound for `max_tokens`.
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for QueryDefaults {
    fn default() -> Self {
        let plan = RetrievalPlan::default();
        let gen = GenerationParams::default();
        Self {
            k: plan.k,
            method: plan.method,
            window: plan.window,
            stride: plan.stride,
            max_tokens: gen.max_tokens,
            seed: gen.seed,
        }
    }
}

pub struct ApiState {
    pub pipeline: Pipeline,
    pub keys: KeySet,
    pub defaults: QueryDefaults,
    pub cors_origins: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestId(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet_method: Option<SnippetMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub excluded_doc_ids: BTreeSet<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl QueryRequest {
    pub fn new(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            k: None,
            snippet_method: None,
            window: None,
            stride: None,
            excluded_doc_ids: BTreeSet::new(),
            max_tokens: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub kind: SegmentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<u64>,
    /// First prompt token index.
    pub start: usize,
    /// One past the last prompt token index.
    pub end: usize,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptView {
    pub text: String,
    pub tokens: Vec<String>,
    pub segments: Vec<SegmentView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetView {
    pub doc_id: u64,
    /// 1-based retrieval rank, matching the prompt header ordinal.
    pub rank: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub similarity: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalView {
    /// True when some partitions failed and results cover only the rest.
    pub partial: bool,
    pub partitions_total: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionView {
    pub doc_id: u64,
    /// The id appears in none of hits, document segments or doc scores.
    pub honored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEcho {
    pub k: usize,
    pub snippet_method: SnippetMethod,
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub request_id: String,
    pub query: String,
    pub answer_tokens: Vec<String>,
    pub prompt: PromptView,
    /// `[out_len][in_len]`, flattened row-major in `data`.
    pub attribution: TokenAttribution,
    pub doc_scores: Vec<DocumentAttentionScore>,
    pub hits: Vec<SearchHit>,
    pub snippets: Vec<SnippetView>,
    pub retrieval: RetrievalView,
    pub exclusions: Vec<ExclusionView>,
    pub skipped_documents: Vec<u64>,
    pub plan: PlanEcho,
    pub backend: BackendEcho,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorDetail,
    pub request_id: String,
}

fn error_response(status: StatusCode, code: &str, message: impl Into<String>, request_id: &RequestId) -> Response {
    let body = ErrorResponse {
        error: ErrorDetail {
            code: code.to_owned(),
            message: message.into(),
        },
        request_id: request_id.0.clone(),
    };
    (status, Json(body)).into_response()
}

fn pipeline_error(e: PipelineError, rid: &RequestId) -> Response {
    let (status, code) = match &e {
        PipelineError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
        PipelineError::RetrievalUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "retrieval_unavailable"),
        PipelineError::Embed(EmbedError::InvalidInput { .. }) => (StatusCode::BAD_REQUEST, "invalid_request"),
        PipelineError::Embed(_) => (StatusCode::BAD_GATEWAY, "embedding_failed"),
        PipelineError::Backend(BackendError::InvalidRequest(_)) => (StatusCode::BAD_REQUEST, "invalid_request"),
        PipelineError::Backend(_) => (StatusCode::BAD_GATEWAY, "backend_failed"),
        PipelineError::Corpus(_) => (StatusCode::INTERNAL_SERVER_ERROR, "corpus_error"),
    };
    if status.is_server_error() {
        tracing::error!(request_id = %rid.0, error = %e, "query failed");
    }
    error_response(status, code, e.to_string(), rid)
}

pub fn router(state: Arc<ApiState>) -> Router {
    let cors = cors_layer(&state.cors_origins);
    let protected = Router::new()
        .route("/api/query", post(handle_query))
        .route("/api/rewrite", post(handle_rewrite))
        .route_layer(middleware::from_fn_with_state(state.clone(), authenticate));
    Router::new()
        .route("/api/health", get(handle_health))
        .merge(protected)
        .with_state(state)
        .layer(CompressionLayer::new())
        .layer(cors)
        .layer(middleware::from_fn(assign_request_id))
}

fn cors_layer(origins: &[String]) -> CorsLayer {
    let allowed: Vec<HeaderValue> = origins
        .iter()
        .filter_map(|o| match HeaderValue::from_str(o) {
            Ok(v) => Some(v),
            Err(_) => {
                tracing::warn!(origin = %o, "ignoring invalid CORS origin");
                None
            }
        })
        .collect();
    CorsLayer::new()
        .allow_origin(AllowOrigin::list(allowed))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, HeaderName::from_static(API_KEY_HEADER)])
        .expose_headers([HeaderName::from_static(REQUEST_ID_HEADER)])
}

async fn assign_request_id(mut req: Request, next: Next) -> Response {
    let id = RequestId(uuid::Uuid::new_v4().to_string());
    req.extensions_mut().insert(id.clone());
    let mut resp = next.run(req).await;
    if let Ok(v) = HeaderValue::from_str(&id.0) {
        resp.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    resp
}

async fn authenticate(State(state): State<Arc<ApiState>>, req: Request, next: Next) -> Response {
    let presented = req.headers().get(API_KEY_HEADER).map(HeaderValue::as_bytes);
    if state.keys.verify(presented) {
        return next.run(req).await;
    }
    let rid = req
        .extensions()
        .get::<RequestId>()
        .cloned()
        .unwrap_or_else(|| RequestId(String::new()));
    tracing::debug!(request_id = %rid.0, "rejected unauthenticated request");
    error_response(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid API key", &rid)
}

async fn handle_health(State(state): State<Arc<ApiState>>) -> Response {
    let info = state.pipeline.gateway.info();
    Json(serde_json::json!({
        "status": "ok",
        "documents": state.pipeline.corpus.len(),
        "embedding_dim": state.pipeline.embedder.dim(),
        "model": info,
    }))
    .into_response()
}

async fn handle_query(
    State(state): State<Arc<ApiState>>,
    Extension(rid): Extension<RequestId>,
    body: Bytes,
) -> Response {
    let req = match parse_request(&body, &rid) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if !req.excluded_doc_ids.is_empty() {
        return error_response(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            "excluded_doc_ids is only accepted by /api/rewrite",
            &rid,
        );
    }
    run_query(&state, req, rid).await
}

async fn handle_rewrite(
    State(state): State<Arc<ApiState>>,
    Extension(rid): Extension<RequestId>,
    body: Bytes,
) -> Response {
    match parse_request(&body, &rid) {
        Ok(req) => run_query(&state, req, rid).await,
        Err(resp) => resp,
    }
}

fn parse_request(body: &Bytes, rid: &RequestId) -> Result<QueryRequest, Response> {
    serde_json::from_slice(body).map_err(|e| {
        error_response(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            format!("malformed request body: {e}"),
            rid,
        )
    })
}

async fn run_query(state: &ApiState, req: QueryRequest, rid: RequestId) -> Response {
    let d = &state.defaults;
    let plan = RetrievalPlan {
        k: req.k.unwrap_or(d.k),
        method: req.snippet_method.unwrap_or(d.method),
        window: req.window.unwrap_or(d.window),
        stride: req.stride.unwrap_or(d.stride),
        excluded: req.excluded_doc_ids.clone(),
    };
    let max_tokens = req.max_tokens.unwrap_or(d.max_tokens);
    if max_tokens > d.max_tokens {
        return error_response(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            format!("max_tokens must be <= {}", d.max_tokens),
            &rid,
        );
    }
    let params = GenerationParams {
        max_tokens,
        seed: req.seed.unwrap_or(d.seed),
    };
    match state.pipeline.run(&req.query, &plan, &params).await {
        Ok(out) => Json(build_response(rid, req.query, &plan, out)).into_response(),
        Err(e) => pipeline_error(e, &rid),
    }
}

fn build_response(
    rid: RequestId,
    query: String,
    plan: &RetrievalPlan,
    out: ragscope_core::pipeline::PipelineOutput,
) -> QueryResponse {
    let tokens = out.prompt.surfaces();
    let segments: Vec<SegmentView> = out
        .prompt
        .layout
        .segments
        .iter()
        .map(|s| SegmentView {
            kind: s.kind,
            doc_id: s.doc_id,
            start: s.prompt_token_start,
            end: s.prompt_token_end,
            tokens: tokens[s.prompt_token_start..s.prompt_token_end].to_vec(),
        })
        .collect();
    let gen = out.generation;
    let exclusions = plan
        .excluded
        .iter()
        .map(|&id| ExclusionView {
            doc_id: id,
            honored: !out.hits.iter().any(|h| h.doc_id == id)
                && !segments.iter().any(|s| s.doc_id == Some(id))
                && !gen.doc_scores.iter().any(|s| s.doc_id == id),
        })
        .collect();
    QueryResponse {
        request_id: rid.0,
        query,
        answer_tokens: gen.output_tokens,
        prompt: PromptView {
            text: out.prompt.text,
            tokens,
            segments,
        },
        attribution: gen.attribution,
        doc_scores: gen.doc_scores,
        hits: out.hits,
        snippets: out
            .snippets
            .iter()
            .enumerate()
            .map(|(i, s)| SnippetView {
                doc_id: s.doc_id,
                rank: i + 1,
                token_start: s.token_start,
                token_end: s.token_end,
                similarity: s.similarity,
            })
            .collect(),
        retrieval: RetrievalView {
            partial: !out.retrieval_failures.is_empty(),
            partitions_total: out.partitions_total,
            failures: out.retrieval_failures,
        },
        exclusions,
        skipped_documents: out.skipped_documents,
        plan: PlanEcho {
            k: plan.k,
            snippet_method: plan.method,
            window: plan.window,
            stride: plan.stride,
        },
        backend: gen.backend_info,
        timings: out.timings,
    }
}
