//! Embedding vectors and the text-encoder abstraction.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("invalid input at index {index}: {reason}")]
    InvalidInput { index: usize, reason: String },
    #[error("embedding service timed out")]
    Timeout,
    #[error("embedding service refused connection: {0}")]
    Refused(String),
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding protocol error: {0}")]
    Protocol(String),
    #[error("expected dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Unit-norm embedding. Construction always normalizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// L2-normalizes `values`. Returns `None` for empty, zero or non-finite input.
    pub fn normalized(values: Vec<f32>) -> Option<Self> {
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if values.is_empty() || norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Self(
            values
                .into_iter()
                .map(|v| (f64::from(v) / norm) as f32)
                .collect(),
        ))
    }

    /// Wraps values that are already unit norm (e.g. read back from an index file).
    pub fn from_unit(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Self) -> f32 {
        inner_product(&self.0, &other.0)
    }
}

/// Sequential left-to-right inner product. Every score in the crate goes through here.
#[inline]
pub fn inner_product(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds every text, preserving order. Fails naming the first invalid index.
    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text.to_owned()]).await?;
        out.pop()
            .ok_or_else(|| EmbedError::Protocol("empty batch response".into()))
    }
}

/// Rejects empty or whitespace-only texts, naming the first offending index.
pub fn check_texts(texts: &[String]) -> Result<(), EmbedError> {
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(index) => Err(EmbedError::InvalidInput {
            index,
            reason: "text is empty or whitespace-only".into(),
        }),
        None => Ok(()),
    }
}

/// Hashed character 3-gram embedder.
///
/// The text is lowercased and padded with one space on each side; every
/// 3-character window is hashed with seeded XXH3. The low bits pick one of
/// `dim` buckets and the top bit picks the sign. The bucket vector is then
/// L2-normalized. A pure function of `(text, seed, dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceEmbedder {
    dim: usize,
    seed: u64,
}

impl ReferenceEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::InvalidInput {
                index: 0,
                reason: "text is empty or whitespace-only".into(),
            });
        }
        let padded: Vec<char> = std::iter::once(' ')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once(' '))
            .collect();

        let mut buckets = vec![0.0f32; self.dim];
        let mut gram = String::with_capacity(12);
        for window in padded.windows(3) {
            gram.clear();
            gram.extend(window);
            let h = xxh3_64_with_seed(gram.as_bytes(), self.seed);
            let bucket = (h % self.dim as u64) as usize;
            buckets[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        Ok(EmbeddingVector::normalized(buckets).unwrap_or_else(|| {
            // Every 3-gram cancelled out; fall back to a single hashed axis.
            let mut axis = vec![0.0f32; self.dim];
            axis[(xxh3_64_with_seed(text.as_bytes(), self.seed) % self.dim as u64) as usize] = 1.0;
            EmbeddingVector::from_unit(axis)
        }))
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

#[async_trait]
impl Embedder for ReferenceEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.embed_texts(texts)
    }
}
