//! Language-model backends and the gateway that turns their raw output into attributions.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::{xxh3_64_with_seed, Xxh3};

use crate::attention::{
    aggregate_attribution, score_documents, AttentionError, AttentionTensor, DocumentAttentionScore,
    RawAttention, TokenAttribution,
};
use crate::context::ContextLayout;
use crate::embed::ReferenceEmbedder;

pub const DEFAULT_MAX_TOKENS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("model backend timed out")]
    Timeout,
    #[error("model backend unreachable: {0}")]
    Unreachable(String),
    #[error("model backend protocol error: {0}")]
    Protocol(String),
    #[error("model backend returned no tokens")]
    EmptyGeneration,
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_name: String,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: 0,
        }
    }
}

/// A model server: fast generation, then a separate forward pass for attention.
#[async_trait]
pub trait ModelBackend: Send + Sync {
    async fn info(&self) -> Result<BackendInfo, BackendError>;

    async fn generate(
        &self,
        prompt_tokens: &[String],
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError>;

    /// Rows are normalized over the prompt plus the preceding generated tokens.
    async fn attention(
        &self,
        prompt_tokens: &[String],
        output_tokens: &[String],
    ) -> Result<RawAttention, BackendError>;
}

/// Deterministic stand-in model.
///
/// Generation copies prompt tokens: step `t` hashes the prompt and every
/// token generated so far with the request seed and emits
/// `prompt[hash % len]`. It stops at `max_tokens`, or at a sentence
/// terminator once at least [`ReferenceBackend::MIN_ANSWER`] tokens exist.
///
/// Attention for output `o` in layer `l`, head `h` is
/// `softmax(tau[l][h] * sim(e(out_o), e(p)))` over the prompt tokens and the
/// outputs before `o`, where `e` is the reference embedder and
/// `tau[l][h] = 1 + 9 * u` with `u` in `[0, 1)` hashed from the seed, layer and head.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    embedder: ReferenceEmbedder,
    layers: usize,
    heads: usize,
    seed: u64,
}

impl ReferenceBackend {
    pub const MODEL_NAME: &'static str = "reference-copy-model";
    pub const MIN_ANSWER: usize = 8;

    pub fn new(embedder: ReferenceEmbedder, layers: usize, heads: usize, seed: u64) -> Self {
        assert!(layers > 0 && heads > 0, "need at least one layer and head");
        Self {
            embedder,
            layers,
            heads,
            seed,
        }
    }

    pub fn temperature(&self, layer: usize, head: usize) -> f64 {
        let mut key = [0u8; 16];
        key[..8].copy_from_slice(&(layer as u64).to_le_bytes());
        key[8..].copy_from_slice(&(head as u64).to_le_bytes());
        let u = (xxh3_64_with_seed(&key, self.seed) >> 11) as f64 / (1u64 << 53) as f64;
        1.0 + 9.0 * u
    }

    fn token_vectors<'a>(
        &self,
        tokens: impl Iterator<Item = &'a String>,
    ) -> Result<HashMap<&'a str, Vec<f32>>, BackendError> {
        let mut cache = HashMap::new();
        for t in tokens {
            if !cache.contains_key(t.as_str()) {
                let v = self
                    .embedder
                    .embed_text(t)
                    .map_err(|e| BackendError::InvalidRequest(format!("token {t:?}: {e}")))?;
                cache.insert(t.as_str(), v.into_inner());
            }
        }
        Ok(cache)
    }
}

fn is_terminator(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

#[async_trait]
impl ModelBackend for ReferenceBackend {
    async fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            model_name: Self::MODEL_NAME.to_owned(),
            layers: self.layers,
            heads: self.heads,
        })
    }

    async fn generate(
        &self,
        prompt_tokens: &[String],
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        if prompt_tokens.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if params.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        let mut state = Xxh3::with_seed(params.seed);
        for t in prompt_tokens {
            state.update(t.as_bytes());
            state.update(&[0x1f]);
        }
        let mut out: Vec<String> = Vec::new();
        while out.len() < params.max_tokens {
            let h = state.digest();
            let next = &prompt_tokens[(h % prompt_tokens.len() as u64) as usize];
            state.update(next.as_bytes());
            state.update(&[0x1e]);
            out.push(next.clone());
            if out.len() >= Self::MIN_ANSWER && is_terminator(next) {
                break;
            }
        }
        Ok(out)
    }

    async fn attention(
        &self,
        prompt_tokens: &[String],
        output_tokens: &[String],
    ) -> Result<RawAttention, BackendError> {
        if prompt_tokens.is_empty() || output_tokens.is_empty() {
            return Err(BackendError::InvalidRequest(
                "prompt and output must both be non-empty".into(),
            ));
        }
        let cache = self.token_vectors(prompt_tokens.iter().chain(output_tokens))?;
        let in_len = prompt_tokens.len();
        let context: Vec<&[f32]> = prompt_tokens
            .iter()
            .chain(output_tokens)
            .map(|t| cache[t.as_str()].as_slice())
            .collect();

        // Similarities are shared by every head; only the temperature differs.
        let sims: Vec<Vec<f64>> = output_tokens
            .iter()
            .enumerate()
            .map(|(o, t)| {
                let q = cache[t.as_str()].as_slice();
                context[..in_len + o]
                    .iter()
                    .map(|k| f64::from(crate::embed::inner_product(q, k)))
                    .collect()
            })
            .collect();

        let weights = (0..self.layers)
            .map(|l| {
                (0..self.heads)
                    .map(|h| {
                        let tau = self.temperature(l, h);
                        sims.iter().map(|row| softmax(row, tau)).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(RawAttention {
            layers: self.layers,
            heads: self.heads,
            weights,
        })
    }
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (tau * (s - max)).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Echo of the model and decoding settings used for a generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEcho {
    pub model_name: String,
    pub layers: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub output_tokens: Vec<String>,
    pub attribution: TokenAttribution,
    pub doc_scores: Vec<DocumentAttentionScore>,
    pub layout: ContextLayout,
    pub backend_info: BackendEcho,
}

/// Wall time of the two backend passes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GatewayTimings {
    pub generation: Duration,
    pub attention_forward: Duration,
}

/// Validates a backend once, then runs generate + attention and reduces the result.
#[derive(Clone)]
pub struct InferenceGateway {
    backend: Arc<dyn ModelBackend>,
    info: BackendInfo,
}

impl std::fmt::Debug for InferenceGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InferenceGateway").field("info", &self.info).finish()
    }
}

impl InferenceGateway {
    pub async fn connect(backend: Arc<dyn ModelBackend>) -> Result<Self, BackendError> {
        let info = backend.info().await?;
        if info.layers == 0 || info.heads == 0 {
            return Err(BackendError::Protocol(format!(
                "backend reports {} layers and {} heads",
                info.layers, info.heads
            )));
        }
        Ok(Self { backend, info })
    }

    pub fn info(&self) -> &BackendInfo {
        &self.info
    }

    pub async fn generate(
        &self,
        prompt_tokens: &[String],
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        if prompt_tokens.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if params.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        let mut out = self.backend.generate(prompt_tokens, params).await?;
        if out.is_empty() {
            return Err(BackendError::EmptyGeneration);
        }
        if out.len() > params.max_tokens {
            tracing::warn!(
                got = out.len(),
                limit = params.max_tokens,
                "backend exceeded max_tokens; truncating"
            );
            out.truncate(params.max_tokens);
        }
        Ok(out)
    }

    pub async fn attention_forward(
        &self,
        prompt_tokens: &[String],
        output_tokens: &[String],
    ) -> Result<AttentionTensor, BackendError> {
        let raw = self.backend.attention(prompt_tokens, output_tokens).await?;
        Ok(AttentionTensor::from_raw(
            &raw,
            prompt_tokens.len(),
            output_tokens.len(),
            self.info.layers,
            self.info.heads,
        )?)
    }

    pub async fn run(
        &self,
        prompt_tokens: &[String],
        layout: &ContextLayout,
        params: &GenerationParams,
    ) -> Result<(GenerationResult, GatewayTimings), BackendError> {
        if layout.prompt_len() != prompt_tokens.len() {
            return Err(BackendError::InvalidRequest(format!(
                "layout covers {} tokens, prompt has {}",
                layout.prompt_len(),
                prompt_tokens.len()
            )));
        }
        let started = Instant::now();
        let output_tokens = self.generate(prompt_tokens, params).await?;
        let generation = started.elapsed();

        let started = Instant::now();
        let tensor = self.attention_forward(prompt_tokens, &output_tokens).await?;
        let attention_forward = started.elapsed();

        let attribution = aggregate_attribution(&tensor);
        let doc_scores = score_documents(&attribution, layout)?;
        Ok((
            GenerationResult {
                output_tokens,
                attribution,
                doc_scores,
                layout: layout.clone(),
                backend_info: BackendEcho {
                    model_name: self.info.model_name.clone(),
                    layers: self.info.layers,
                    heads: self.info.heads,
                    max_tokens: params.max_tokens,
                    seed: params.seed,
                },
            },
            GatewayTimings {
                generation,
                attention_forward,
            },
        ))
    }
}
