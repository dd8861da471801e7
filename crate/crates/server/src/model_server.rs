//! HTTP wrapper around the reference model and embedder, speaking the same
//! protocol the remote clients expect. Useful for exercising a split deployment
//! without a GPU.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ragscope_core::backend::{BackendError, GenerationParams, ModelBackend, ReferenceBackend};
use ragscope_core::embed::{EmbedError, ReferenceEmbedder};
use serde::de::DeserializeOwned;

use crate::remote::{AttentionRequest, EmbedRequest, EmbedResponse, GenerateRequest, GenerateResponse};

#[derive(Clone)]
pub struct ModelServerState {
    pub backend: Arc<ReferenceBackend>,
    pub embedder: ReferenceEmbedder,
}

pub fn router(state: ModelServerState) -> Router {
    Router::new()
        .route("/info", get(info))
        .route("/generate", post(generate))
        .route("/attention", post(attention))
        .route("/embed", post(embed))
        .with_state(state)
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(serde_json::json!({ "error": message.to_string() }))).into_response()
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

fn backend_error(e: BackendError) -> Response {
    let status = match e {
        BackendError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, e)
}

async fn info(State(s): State<ModelServerState>) -> Response {
    match s.backend.info().await {
        Ok(i) => Json(i).into_response(),
        Err(e) => backend_error(e),
    }
}

async fn generate(State(s): State<ModelServerState>, body: Bytes) -> Response {
    let req: GenerateRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let params = GenerationParams {
        max_tokens: req.max_tokens,
        seed: req.seed,
    };
    match s.backend.generate(&req.prompt_tokens, &params).await {
        Ok(output_tokens) => Json(GenerateResponse { output_tokens }).into_response(),
        Err(e) => backend_error(e),
    }
}

async fn attention(State(s): State<ModelServerState>, body: Bytes) -> Response {
    let req: AttentionRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match s.backend.attention(&req.prompt_tokens, &req.output_tokens).await {
        Ok(raw) => Json(raw).into_response(),
        Err(e) => backend_error(e),
    }
}

async fn embed(State(s): State<ModelServerState>, body: Bytes) -> Response {
    let req: EmbedRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match s.embedder.embed_texts(&req.texts) {
        Ok(vs) => Json(EmbedResponse {
            vectors: vs.into_iter().map(|v| v.into_inner()).collect(),
        })
        .into_response(),
        Err(e @ EmbedError::InvalidInput { .. }) => error(StatusCode::BAD_REQUEST, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}
