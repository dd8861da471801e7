//! HTTP clients for an external embedding service and model server, plus
//! the wire types both sides share.

use std::time::Duration;

use async_trait::async_trait;
use ragscope_core::attention::RawAttention;
use ragscope_core::backend::{BackendError, BackendInfo, GenerationParams, ModelBackend};
use ragscope_core::embed::{check_texts, EmbedError, Embedder, EmbeddingVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt_tokens: Vec<String>,
    pub max_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub output_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRequest {
    pub prompt_tokens: Vec<String>,
    pub output_tokens: Vec<String>,
}

fn base(url: &str) -> String {
    url.trim_end_matches('/').to_owned()
}

/// Embedding service client: `POST /embed {"texts"} -> {"vectors"}`.
///
/// Returned vectors are re-normalized here; services may send raw outputs.
#[derive(Debug)]
pub struct RemoteEmbedder {
    client: reqwest::Client,
    url: String,
    dim: usize,
    permits: Semaphore,
}

impl RemoteEmbedder {
    pub fn new(url: &str, dim: usize, timeout: Duration, max_in_flight: usize) -> reqwest::Result<Self> {
        Ok(Self {
            client: reqwest::Client::builder().timeout(timeout).build()?,
            url: base(url),
            dim,
            permits: Semaphore::new(max_in_flight.max(1)),
        })
    }
}

fn embed_transport(e: reqwest::Error) -> EmbedError {
    if e.is_timeout() {
        EmbedError::Timeout
    } else if e.is_connect() {
        EmbedError::Refused(e.to_string())
    } else if e.is_decode() {
        EmbedError::Protocol(e.to_string())
    } else {
        EmbedError::Transport(e.to_string())
    }
}

#[async_trait]
impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let resp = self
            .client
            .post(format!("{}/embed", self.url))
            .json(&EmbedRequest { texts: texts.to_vec() })
            .send()
            .await
            .map_err(embed_transport)?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(EmbedError::Protocol(format!("HTTP {status}: {body}")));
        }
        let body: EmbedResponse = resp.json().await.map_err(embed_transport)?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::Protocol(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if v.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                EmbeddingVector::normalized(v)
                    .ok_or_else(|| EmbedError::Protocol(format!("vector {i} is zero or non-finite")))
            })
            .collect()
    }
}

/// Model-server client speaking `/info`, `/generate` and `/attention`.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    client: reqwest::Client,
    url: String,
}

impl RemoteBackend {
    pub fn new(url: &str, timeout: Duration) -> reqwest::Result<Self> {
        Ok(Self {
            client: reqwest::Client::builder().timeout(timeout).build()?,
            url: base(url),
        })
    }

    async fn read<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, BackendError> {
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(BackendError::Protocol(format!("HTTP {status}: {body}")));
        }
        resp.json().await.map_err(backend_transport)
    }
}

fn backend_transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else if e.is_decode() {
        BackendError::Protocol(e.to_string())
    } else {
        BackendError::Unreachable(e.to_string())
    }
}

#[async_trait]
impl ModelBackend for RemoteBackend {
    async fn info(&self) -> Result<BackendInfo, BackendError> {
        let resp = self
            .client
            .get(format!("{}/info", self.url))
            .send()
            .await
            .map_err(backend_transport)?;
        Self::read(resp).await
    }

    async fn generate(
        &self,
        prompt_tokens: &[String],
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        let resp = self
            .client
            .post(format!("{}/generate", self.url))
            .json(&GenerateRequest {
                prompt_tokens: prompt_tokens.to_vec(),
                max_tokens: params.max_tokens,
                seed: params.seed,
            })
            .send()
            .await
            .map_err(backend_transport)?;
        Ok(Self::read::<GenerateResponse>(resp).await?.output_tokens)
    }

    async fn attention(
        &self,
        prompt_tokens: &[String],
        output_tokens: &[String],
    ) -> Result<RawAttention, BackendError> {
        let resp = self
            .client
            .post(format!("{}/attention", self.url))
            .json(&AttentionRequest {
                prompt_tokens: prompt_tokens.to_vec(),
                output_tokens: output_tokens.to_vec(),
            })
            .send()
            .await
            .map_err(backend_transport)?;
        Self::read(resp).await
    }
}

/// Caps concurrent calls into a backend; excess callers wait.
pub struct LimitedBackend {
    inner: std::sync::Arc<dyn ModelBackend>,
    permits: Semaphore,
}

impl LimitedBackend {
    pub fn new(inner: std::sync::Arc<dyn ModelBackend>, max_in_flight: usize) -> Self {
        Self {
            inner,
            permits: Semaphore::new(max_in_flight.max(1)),
        }
    }

    async fn permit(&self) -> Result<tokio::sync::SemaphorePermit<'_>, BackendError> {
        self.permits
            .acquire()
            .await
            .map_err(|e| BackendError::Unreachable(e.to_string()))
    }
}

#[async_trait]
impl ModelBackend for LimitedBackend {
    async fn info(&self) -> Result<BackendInfo, BackendError> {
        self.inner.info().await
    }

    async fn generate(
        &self,
        prompt_tokens: &[String],
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        let _p = self.permit().await?;
        self.inner.generate(prompt_tokens, params).await
    }

    async fn attention(
        &self,
        prompt_tokens: &[String],
        output_tokens: &[String],
    ) -> Result<RawAttention, BackendError> {
        let _p = self.permit().await?;
        self.inner.attention(prompt_tokens, output_tokens).await
    }
}
